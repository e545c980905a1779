//! The short-TTI loop: arrivals, per-cell scheduling, link evaluation against
//! the frozen grids of every cell, HARQ and metric accumulation.

use std::ops::Range;

use crate::config::ScenarioConfig;
use crate::error::{invalid, Result};
use crate::link::{eesm, lmmse_irc_combiner, nsbps_urllc_combiner, prb_rate};
use crate::metrics::{rate_loss_ledger, LedgerEvent, PacketRecord, RunCounters, RunMetrics, UserRecord};
use crate::scheduler::{
    schedule_slot, AllocationGrid, EmbbBeam, GrantMode, Kind, Policy, PrbSlot, RateHistory, SchedulerParams, SchedulingRequest, UrllcGrant, UserId,
};
use crate::spatial::{ComplexMatrix, ComplexVector};
use crate::traffic::{finalize_latency, harq_step, AttemptSpan, HarqOutcome, HarqProcess, RE_PER_PRB_SLOT};
use crate::world::World;

/// Leakage of a projected eMBB stream into a nulling URLLC receiver, relative
/// to the URLLC signal, above which the null is considered broken.
pub const NULL_RESIDUAL_LIMIT: f64 = 1e-18;

const RATE_FLOOR: f64 = 1e-6;

/// Hooks for optional traces. Defaults do nothing.
pub trait Observer {
    fn grid(&mut self, _policy: Policy, _tti: u64, _slot: usize, _cell: usize, _cells: &[PrbSlot]) -> Result<()> {
        Ok(())
    }

    fn channels(&mut self, _world: &World) -> Result<()> {
        Ok(())
    }
}

pub struct NoTrace;

impl Observer for NoTrace {}

#[derive(Clone, Debug)]
struct Tx {
    user: UserId,
    precoder: ComplexVector,
    power: f64,
}

struct Live {
    packet: usize,
    remaining: f64,
    eligible: u64,
    first_tx: Option<u64>,
    last_tx: u64,
    spans: Vec<AttemptSpan>,
    harq: HarqProcess,
    /// Worst realized/threshold ratio over the current attempt's grants.
    margin: f64,
    sent_now: bool,
    alpha_used: bool,
    punctured: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Impact {
    None,
    Punctured,
    Shared,
    Projected(f64),
}

#[derive(Clone, Copy, Debug)]
struct EmbbResult {
    user: UserId,
    bits: f64,
    baseline: f64,
    impact: Impact,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
struct Signature {
    embb: Option<(UserId, bool)>,
    urllc: Option<(UserId, u64, GrantMode)>,
}

impl Signature {
    fn of(c: &PrbSlot) -> Self {
        Self {
            embb: c.embb.as_ref().map(|e| (e.user, matches!(e.beam, EmbbBeam::Projected { .. }))),
            urllc: c.urllc.as_ref().map(|u| (u.user, u.packet, u.mode)),
        }
    }
}

struct Reception {
    sinr: f64,
    combiner: ComplexVector,
}

/// Post-combining SINR of `own` at `rx` given every other transmission on the PRB.
fn receive(world: &World, rx: UserId, serving: usize, prb: usize, own: &Tx, others: &[(usize, &Tx)], null_ref: Option<&ComplexVector>) -> Result<(Reception, bool)> {
    let h = world.channel(rx, serving, prb);
    let hv = h.mul_vec(&own.precoder);
    let mut cov = ComplexMatrix::identity(h.rows());
    let mut leaks = Vec::with_capacity(others.len());
    for (cell, t) in others {
        let g = world.channel(rx, *cell, prb).mul_vec(&t.precoder);
        cov.add_outer(&g, t.power);
        leaks.push((g, t.power));
    }
    let mut fell_back = false;
    let u = match null_ref {
        Some(r) => match nsbps_urllc_combiner(h, &own.precoder, r, &cov) {
            Ok(u) => u,
            Err(_) => {
                fell_back = true;
                lmmse_irc_combiner(h, &own.precoder, &cov)?
            }
        },
        None => lmmse_irc_combiner(h, &own.precoder, &cov)?,
    };
    let u = u.normalized()?;
    let signal = own.power * u.dot(&hv).norm_sqr();
    let noise = 1.0 + leaks.iter().map(|(g, p)| p * u.dot(g).norm_sqr()).sum::<f64>();
    Ok((Reception { sinr: signal / noise, combiner: u }, fell_back))
}

#[derive(Clone, Copy, Debug, Default)]
struct EventAcc {
    allocated: u64,
    punctured: u64,
    shared: u64,
    projected: u64,
    projection_loss: f64,
    baseline: f64,
    actual: f64,
}

struct PolicyRun {
    policy: Policy,
    params: SchedulerParams,
    grids: Vec<AllocationGrid>,
    history: RateHistory,
    queues: Vec<Vec<Live>>,
    records: Vec<PacketRecord>,
    user_bits: Vec<f64>,
    user_granted: Vec<u64>,
    user_impacted: Vec<u64>,
    tti_bits: Vec<f64>,
    acc: Vec<EventAcc>,
    events: Vec<LedgerEvent>,
    counters: RunCounters,
    cache: Vec<Option<EmbbResult>>,
    signatures: Vec<Signature>,
}

impl PolicyRun {
    fn new(world: &World, policy: Policy) -> Self {
        let cfg = world.config();
        let n_users = world.users().len();
        let n_slots = cfg.timing.slots_per_tti as usize;
        Self {
            policy,
            params: SchedulerParams {
                gamma: cfg.gamma,
                beta_llc: cfg.beta_llc,
                beta_mbb: cfg.beta_mbb,
                outage_gap: cfg.outage_gap(),
                eesm_beta: cfg.eesm_beta,
                v_ref: world.v_ref().clone(),
            },
            grids: (0..cfg.n_cells).map(|_| AllocationGrid::new(cfg.n_prb, n_slots)).collect(),
            history: RateHistory::new(n_users, cfg.pf_horizon_ttis, RATE_FLOOR),
            queues: (0..cfg.n_cells).map(|_| Vec::new()).collect(),
            records: Vec::new(),
            user_bits: vec![0.0; n_users],
            user_granted: vec![0; n_users],
            user_impacted: vec![0; n_users],
            tti_bits: vec![0.0; n_users],
            acc: vec![EventAcc::default(); n_users],
            events: Vec::new(),
            counters: RunCounters::default(),
            cache: vec![None; cfg.n_cells * cfg.n_prb],
            signatures: vec![Signature::default(); cfg.n_cells * cfg.n_prb],
        }
    }

    fn backlog(&self) -> bool {
        self.queues.iter().any(|q| !q.is_empty())
    }

    fn record(&mut self, world: &World, live: &Live, delivered: bool) -> Result<()> {
        let p = &world.packets()[live.packet];
        let latency = if delivered { Some(finalize_latency(p.arrival_ms, &live.spans, &world.config().timing)?) } else { None };
        self.records.push(PacketRecord {
            packet_id: p.id,
            cell: p.cell,
            user: p.user,
            arrival_tti: p.arrival_slot,
            latency,
            harq_attempts: live.harq.attempts,
            alpha_used: live.alpha_used,
            punctured: live.punctured,
        });
        Ok(())
    }

    fn close_tti(&mut self, tti: u64, world: &World) {
        for u in world.users() {
            let i = u.id as usize;
            self.history.update(u.id, self.tti_bits[i]);
            self.tti_bits[i] = 0.0;
            let a = std::mem::take(&mut self.acc[i]);
            if a.punctured + a.shared + a.projected > 0 {
                self.events.push(LedgerEvent {
                    user: u.id,
                    tti,
                    allocated: a.allocated,
                    punctured: a.punctured,
                    shared: a.shared,
                    projected: a.projected,
                    projection_loss: a.projection_loss,
                    baseline_bits: a.baseline,
                    actual_bits: a.actual,
                });
            }
        }
    }

    fn admit(&mut self, world: &World, arrivals: Range<usize>) -> Result<()> {
        let cfg = world.config();
        for i in arrivals {
            let p = &world.packets()[i];
            let queue = &self.queues[p.cell as usize];
            // Head of line: oldest packet that has not started transmitting.
            let hol_age = queue
                .iter()
                .find(|l| l.spans.is_empty() && l.first_tx.is_none())
                .map(|l| p.arrival_ms - world.packets()[l.packet].arrival_ms);
            let live = Live {
                packet: i,
                remaining: p.payload_bits,
                eligible: p.arrival_slot,
                first_tx: None,
                last_tx: 0,
                spans: Vec::new(),
                harq: HarqProcess::new(p.id, cfg.max_harq_attempts),
                margin: f64::INFINITY,
                sent_now: false,
                alpha_used: false,
                punctured: false,
            };
            self.counters.packets_generated += 1;
            if hol_age.is_some_and(|a| a >= cfg.deadline_ms) {
                self.counters.dropped_queue += 1;
                self.record(world, &live, false)?;
            } else {
                self.queues[p.cell as usize].push(live);
            }
        }
        Ok(())
    }

    fn transmissions(&self, world: &World, slot: usize) -> Vec<Vec<(usize, Tx)>> {
        let n_prb = world.config().n_prb;
        let mut out: Vec<Vec<(usize, Tx)>> = vec![Vec::new(); n_prb];
        for (c, grid) in self.grids.iter().enumerate() {
            for (p, cell) in grid.slot(slot).iter().enumerate() {
                let power = 1.0 / cell.group_size().max(1) as f64;
                if let Some(e) = &cell.embb {
                    let precoder = match &e.beam {
                        EmbbBeam::Native => world.view(c).users[world.local_index(e.user)].prbs[p].precoder.clone(),
                        EmbbBeam::Projected { precoder, .. } => precoder.clone(),
                    };
                    out[p].push((c, Tx { user: e.user, precoder, power }));
                }
                if let Some(u) = &cell.urllc {
                    out[p].push((c, Tx { user: u.user, precoder: u.precoder.clone(), power }));
                }
            }
        }
        out
    }

    fn evaluate_embb(&mut self, world: &World, slot: usize, txs: &[Vec<(usize, Tx)>], fresh: bool) -> Result<()> {
        let cfg = world.config();
        let n_prb = cfg.n_prb;
        let gap = cfg.outage_gap();
        for p in 0..n_prb {
            let mut changed = fresh;
            for c in 0..cfg.n_cells {
                let sig = Signature::of(&self.grids[c].slot(slot)[p]);
                if self.signatures[c * n_prb + p] != sig {
                    self.signatures[c * n_prb + p] = sig;
                    changed = true;
                }
            }
            if !changed {
                continue;
            }
            for c in 0..cfg.n_cells {
                let grid = &self.grids[c];
                let cell = &grid.slot(slot)[p];
                let Some(owner) = grid.embb_owner(p) else {
                    self.cache[c * n_prb + p] = None;
                    continue;
                };
                let impact = match cell.urllc.as_ref().map(|u| u.mode) {
                    Some(GrantMode::Punctured) => Impact::Punctured,
                    Some(GrantMode::Mu) => Impact::Shared,
                    Some(GrantMode::Alpha) => match &cell.embb {
                        Some(e) => match e.beam {
                            EmbbBeam::Projected { retained, .. } => Impact::Projected((1.0 - retained).clamp(0.0, 1.0)),
                            EmbbBeam::Native => return Err(invalid("alpha grant next to a native eMBB beam")),
                        },
                        None => return Err(invalid("alpha grant without eMBB partner")),
                    },
                    Some(GrantMode::Su) | None => Impact::None,
                };
                let bits = match &cell.embb {
                    Some(e) => {
                        let (own, others) = split(&txs[p], e.user);
                        let (r, _) = receive(world, e.user, c, p, own, &others, None)?;
                        RE_PER_PRB_SLOT * prb_rate(r.sinr / gap, 1)
                    }
                    None => 0.0,
                };
                let baseline = if impact == Impact::None {
                    bits
                } else {
                    let native = Tx { user: owner, precoder: world.view(c).users[world.local_index(owner)].prbs[p].precoder.clone(), power: 1.0 };
                    let others: Vec<(usize, &Tx)> = txs[p].iter().filter(|(oc, _)| *oc != c).map(|(oc, t)| (*oc, t)).collect();
                    let (r, _) = receive(world, owner, c, p, &native, &others, None)?;
                    RE_PER_PRB_SLOT * prb_rate(r.sinr / gap, 1)
                };
                self.cache[c * n_prb + p] = Some(EmbbResult { user: owner, bits, baseline, impact });
            }
        }
        Ok(())
    }

    fn account_embb(&mut self, in_horizon: bool) {
        for r in self.cache.iter().flatten() {
            let i = r.user as usize;
            self.tti_bits[i] += r.bits;
            if !in_horizon {
                continue;
            }
            self.user_bits[i] += r.bits;
            if r.impact != Impact::Punctured {
                self.user_granted[i] += 1;
            }
            let a = &mut self.acc[i];
            a.allocated += 1;
            a.baseline += r.baseline;
            a.actual += r.bits;
            match r.impact {
                Impact::None => {}
                Impact::Punctured => a.punctured += 1,
                Impact::Shared => a.shared += 1,
                Impact::Projected(loss) => {
                    a.projected += 1;
                    a.projection_loss += loss;
                }
            }
            if r.impact != Impact::None {
                self.user_impacted[i] += 1;
            }
        }
    }

    fn evaluate_grant(&mut self, world: &World, cell: usize, grant: &UrllcGrant, txs: &[Vec<(usize, Tx)>], in_horizon: bool) -> Result<f64> {
        let mut sinrs = Vec::with_capacity(grant.prbs.len());
        for &p in &grant.prbs {
            let (own, others) = split(&txs[p], grant.user);
            let nulling = grant.mode == GrantMode::Alpha;
            let (r, fell_back) = receive(world, grant.user, cell, p, own, &others, nulling.then(|| world.v_ref()))?;
            if nulling && in_horizon {
                self.counters.receiver_fallbacks += fell_back as u64;
                // Leakage of the projected partner in the same cell.
                let h = world.channel(grant.user, cell, p);
                let desired = own.power * r.combiner.dot(&h.mul_vec(&own.precoder)).norm_sqr();
                for (c, t) in &others {
                    if *c != cell {
                        continue;
                    }
                    let leak = t.power * r.combiner.dot(&h.mul_vec(&t.precoder)).norm_sqr();
                    let residual = if desired > 0.0 { leak / desired } else if leak > 0.0 { f64::INFINITY } else { 0.0 };
                    self.counters.null_checks += 1;
                    self.counters.max_null_residual = self.counters.max_null_residual.max(residual);
                    if !(residual < NULL_RESIDUAL_LIMIT) {
                        self.counters.null_violations += 1;
                    }
                }
            }
            sinrs.push(r.sinr);
        }
        self.user_granted[grant.user as usize] += if in_horizon { grant.prbs.len() as u64 } else { 0 };
        let eff = eesm(&sinrs, self.params.eesm_beta)?;
        let threshold = grant.threshold(self.params.outage_gap);
        Ok(if threshold > 0.0 { eff / threshold } else { 0.0 })
    }

    fn step(&mut self, world: &World, slot: u64, arrivals: Range<usize>, in_horizon: bool, observer: &mut dyn Observer) -> Result<()> {
        let cfg = world.config();
        let spt = cfg.timing.slots_per_tti as u64;
        let s = (slot % spt) as usize;
        let tti = slot / spt;
        if s == 0 && slot > 0 {
            self.close_tti(tti - 1, world);
        }
        self.admit(world, arrivals)?;

        let mut grants: Vec<(usize, usize, UrllcGrant)> = Vec::new();
        for c in 0..cfg.n_cells {
            let queue = &mut self.queues[c];
            let mut index = Vec::new();
            let mut requests = Vec::new();
            for (i, l) in queue.iter().enumerate() {
                if l.eligible <= slot && l.remaining > 0.0 {
                    let p = &world.packets()[l.packet];
                    index.push(i);
                    requests.push(SchedulingRequest { user: p.user, kind: Kind::Urllc, queued_payload: l.remaining, arrival_time: l.eligible, packet: p.id });
                }
            }
            let decision = schedule_slot(self.policy, &self.params, world.view(c), &mut requests, &mut self.grids[c], &self.history, s)?;
            if in_horizon {
                self.counters.scheduling.add(&decision.counters);
            }
            for (k, r) in requests.iter().enumerate() {
                queue[index[k]].remaining = r.queued_payload;
            }
            for g in decision.grants {
                let k = requests.iter().position(|r| r.packet == g.packet).ok_or_else(|| invalid("grant for an unknown packet"))?;
                let l = &mut queue[index[k]];
                l.first_tx.get_or_insert(slot);
                l.last_tx = slot;
                l.sent_now = true;
                l.alpha_used |= g.mode == GrantMode::Alpha;
                l.punctured |= g.mode == GrantMode::Punctured;
                grants.push((c, index[k], g));
            }
            observer.grid(self.policy, tti, s, c, self.grids[c].slot(s))?;
        }

        let txs = self.transmissions(world, s);
        self.evaluate_embb(world, s, &txs, s == 0)?;
        self.account_embb(in_horizon);
        for (c, li, g) in &grants {
            let m = self.evaluate_grant(world, *c, g, &txs, in_horizon)?;
            let l = &mut self.queues[*c][*li];
            l.margin = l.margin.min(m);
        }

        let timing = cfg.timing;
        let payload = cfg.payload_bits;
        for c in 0..cfg.n_cells {
            let mut finished: Vec<(usize, bool)> = Vec::new();
            for (i, l) in self.queues[c].iter_mut().enumerate() {
                if !std::mem::take(&mut l.sent_now) || l.remaining > 1e-9 {
                    continue;
                }
                l.spans.push(AttemptSpan { eligible: l.eligible, first_tx: l.first_tx.expect("sent"), last_tx: l.last_tx });
                match harq_step(&mut l.harq, l.margin, slot, &timing)? {
                    HarqOutcome::Decoded => finished.push((i, true)),
                    HarqOutcome::Dropped => finished.push((i, false)),
                    HarqOutcome::Retransmit { at_slot } => {
                        l.eligible = at_slot;
                        l.remaining = payload;
                        l.first_tx = None;
                        l.margin = f64::INFINITY;
                        self.counters.harq_retransmissions += 1;
                    }
                }
            }
            for &(i, delivered) in finished.iter().rev() {
                let live = self.queues[c].remove(i);
                let user = world.packets()[live.packet].user as usize;
                if delivered {
                    self.counters.packets_delivered += 1;
                    self.tti_bits[user] += payload;
                    self.user_bits[user] += payload;
                } else {
                    self.counters.dropped_harq += 1;
                }
                self.record(world, &live, delivered)?;
            }
        }
        Ok(())
    }

    fn finish(mut self, world: &World, last_slot: u64) -> Result<RunMetrics> {
        let cfg = world.config();
        let spt = cfg.timing.slots_per_tti as u64;
        if last_slot > 0 {
            self.close_tti((last_slot - 1) / spt, world);
        }
        for c in 0..cfg.n_cells {
            for live in std::mem::take(&mut self.queues[c]) {
                self.counters.dropped_horizon += 1;
                self.record(world, &live, false)?;
            }
        }
        self.records.sort_by_key(|r| r.packet_id);
        let seconds = cfg.horizon_ms() / 1000.0;
        let mut users = Vec::with_capacity(world.users().len());
        let mut cells = vec![0.0; cfg.n_cells];
        for u in world.users() {
            let i = u.id as usize;
            let mbps = if seconds > 0.0 { self.user_bits[i] / seconds / 1e6 } else { 0.0 };
            cells[u.cell] += mbps;
            users.push(UserRecord {
                user: u.id,
                cell: u.cell as u32,
                kind: u.kind,
                mean_throughput_mbps: mbps,
                prbs_granted: self.user_granted[i],
                prbs_impacted: self.user_impacted[i],
            });
        }
        // Only events inside the horizon were accumulated.
        let ledger = rate_loss_ledger(&self.events, &self.counters.scheduling);
        Ok(RunMetrics {
            policy: self.policy,
            seed: cfg.seed,
            ttis: cfg.ttis,
            n_cells: cfg.n_cells,
            omega: cfg.omega,
            packets: self.records,
            users,
            cell_throughput_mbps: cells,
            counters: self.counters,
            ledger_events: self.events,
            ledger,
        })
    }
}

fn split(txs: &[(usize, Tx)], user: UserId) -> (&Tx, Vec<(usize, &Tx)>) {
    let own = &txs.iter().find(|(_, t)| t.user == user).expect("user transmits on this PRB").1;
    let others = txs.iter().filter(|(_, t)| t.user != user).map(|(c, t)| (*c, t)).collect();
    (own, others)
}

/// Runs several policies in lockstep over one world, so they see identical
/// channels and arrivals.
pub fn simulate(cfg: &ScenarioConfig, policies: &[Policy], observer: &mut dyn Observer) -> Result<Vec<RunMetrics>> {
    let mut world = World::new(cfg)?;
    let mut runs: Vec<PolicyRun> = policies.iter().map(|&p| PolicyRun::new(&world, p)).collect();
    let spt = cfg.timing.slots_per_tti as u64;
    if cfg.ttis > 0 {
        observer.channels(&world)?;
    }
    let end = cfg.ttis + cfg.drain_slots;
    let mut slot = 0u64;
    while slot < cfg.ttis || (slot < end && (world.arrivals_pending() || runs.iter().any(PolicyRun::backlog))) {
        if slot > 0 && slot % spt == 0 {
            world.advance_tti()?;
            if slot < cfg.ttis && world.tti() % cfg.channel_dump_period_ttis == 0 {
                observer.channels(&world)?;
            }
        }
        let in_horizon = slot < cfg.ttis;
        // Arrivals in the last instants of the horizon become eligible just after it.
        let arrivals = world.arrivals_up_to(slot);
        for r in &mut runs {
            r.step(&world, slot, arrivals.clone(), in_horizon, observer)?;
        }
        slot += 1;
    }
    runs.into_iter().map(|r| r.finish(&world, slot)).collect()
}

/// Runs the configured policy.
pub fn run(cfg: &ScenarioConfig) -> Result<RunMetrics> {
    Ok(simulate(cfg, &[cfg.policy], &mut NoTrace)?.remove(0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyDelta {
    pub policy: Policy,
    /// Mean cell throughput gain over the puncturing baseline, Mbps.
    pub cell_gain_mbps: f64,
    pub cell_gain_rel: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub runs: Vec<RunMetrics>,
    /// Present when the puncturing policy was among those compared.
    pub deltas: Vec<PolicyDelta>,
}

impl Comparison {
    pub fn get(&self, policy: Policy) -> Option<&RunMetrics> {
        self.runs.iter().find(|r| r.policy == policy)
    }
}

pub fn compare_policies(cfg: &ScenarioConfig, policies: &[Policy], observer: &mut dyn Observer) -> Result<Comparison> {
    if policies.len() < 2 {
        return Err(invalid("comparison needs at least two policies"));
    }
    let runs = simulate(cfg, policies, observer)?;
    let mut deltas = Vec::new();
    if let Some(base) = runs.iter().find(|r| r.policy == Policy::Ps) {
        let b = base.mean_cell_throughput();
        for r in &runs {
            let g = r.mean_cell_throughput() - b;
            deltas.push(PolicyDelta { policy: r.policy, cell_gain_mbps: g, cell_gain_rel: if b > 0.0 { g / b } else { 0.0 } });
        }
    }
    Ok(Comparison { runs, deltas })
}
