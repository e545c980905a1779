//! Per-cell URLLC/eMBB scheduling policies on a PRB × short-TTI grid.
//!
//! Every policy serves URLLC first on PRBs that carry no eMBB data. They
//! differ only in what happens when that is not enough:
//!
//! * `Wpf` leaves the remainder queued.
//! * `Ps` punctures the eMBB user holding the most PRBs.
//! * `Mups` co-schedules with a near-orthogonal eMBB user when one exists,
//!   otherwise punctures.
//! * `Nsbps` tries the same pairing, then projects the eMBB victim closest to
//!   the reference beam onto it and shares the PRB; the URLLC receiver nulls
//!   the reference direction. Puncturing happens only when projection is
//!   impossible.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::link::{eesm, fixed_combiner_sinr, mmse_sinr, prb_rate, projected_precoder};
use crate::spatial::{chordal_distance, deorient_against, orthogonality_measure, ComplexMatrix, ComplexVector};
use crate::traffic::RE_PER_PRB_SLOT;

pub type UserId = u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Urllc,
    Embb,
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Kind::Urllc => "urllc",
            Kind::Embb => "embb",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    Wpf,
    Ps,
    Mups,
    Nsbps,
}

impl Policy {
    pub const ALL: [Policy; 4] = [Policy::Wpf, Policy::Ps, Policy::Mups, Policy::Nsbps];

    pub fn name(self) -> &'static str {
        match self {
            Policy::Wpf => "wpf",
            Policy::Ps => "ps",
            Policy::Mups => "mups",
            Policy::Nsbps => "nsbps",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Policy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Policy::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| invalid(format!("unknown policy {s:?}; expected wpf, ps, mups or nsbps")))
    }
}

/// Pending demand of one user. eMBB users carry an infinite payload.
#[derive(Clone, Debug, PartialEq)]
pub struct SchedulingRequest {
    pub user: UserId,
    pub kind: Kind,
    /// Bits still to send in the current attempt.
    pub queued_payload: f64,
    /// Short-TTI index from which the request may be served.
    pub arrival_time: u64,
    pub packet: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SchedulerParams {
    pub gamma: f64,
    pub beta_llc: f64,
    pub beta_mbb: f64,
    /// Linear outage gap applied to estimated SINRs before rate selection.
    pub outage_gap: f64,
    pub eesm_beta: f64,
    pub v_ref: ComplexVector,
}

/// Exponentially averaged delivered rate per user.
#[derive(Clone, Debug, PartialEq)]
pub struct RateHistory {
    avg: Vec<f64>,
    horizon: f64,
    floor: f64,
}

impl RateHistory {
    pub fn new(n_users: usize, horizon_ttis: f64, floor: f64) -> Self {
        assert!(floor > 0.0 && horizon_ttis >= 1.0);
        Self { avg: vec![floor; n_users], horizon: horizon_ttis, floor }
    }

    pub fn get(&self, user: UserId) -> f64 {
        self.avg[user as usize]
    }

    pub fn update(&mut self, user: UserId, delivered: f64) {
        let a = &mut self.avg[user as usize];
        *a = ((1.0 - 1.0 / self.horizon) * *a + delivered / self.horizon).max(self.floor);
    }
}

pub fn pf_metric(instantaneous_rate: f64, average_rate: f64) -> Result<f64> {
    if !(average_rate > 0.0) {
        return Err(invalid("average rate must be positive"));
    }
    Ok(instantaneous_rate / average_rate)
}

pub fn wpf_metric(instantaneous_rate: f64, average_rate: f64, kind: Kind, params: &SchedulerParams) -> Result<f64> {
    let w = match kind {
        Kind::Urllc => params.beta_llc,
        Kind::Embb => params.beta_mbb,
    };
    Ok(pf_metric(instantaneous_rate, average_rate)? * w)
}

/// Best-separated eMBB partner whose orthogonality to `urllc_precoder` is at least `gamma`.
pub fn try_mu_pairing(
    urllc_precoder: &ComplexVector,
    active_embb: &[(UserId, &ComplexVector)],
    gamma: f64,
) -> Result<Option<UserId>> {
    let mut best: Option<(UserId, f64)> = None;
    for &(id, v) in active_embb {
        let m = orthogonality_measure(urllc_precoder, v)?;
        if m < gamma {
            continue;
        }
        let better = match best {
            None => true,
            Some((bid, bm)) => m > bm || (m == bm && id < bid),
        };
        if better {
            best = Some((id, m));
        }
    }
    Ok(best.map(|(id, _)| id))
}

/// eMBB user whose precoder is closest to the reference beam.
pub fn nsbps_select_victim(active_embb: &[(UserId, &ComplexVector)], v_ref: &ComplexVector) -> Result<Option<UserId>> {
    let mut best: Option<(UserId, f64)> = None;
    for &(id, v) in active_embb {
        let d = chordal_distance(v, v_ref)?;
        let better = match best {
            None => true,
            Some((bid, bd)) => d < bd || (d == bd && id < bid),
        };
        if better {
            best = Some((id, d));
        }
    }
    Ok(best.map(|(id, _)| id))
}

/// Scheduler-side knowledge of one PRB of one user, from the last CSI report.
#[derive(Clone, Debug, PartialEq)]
pub struct PrbView {
    pub channel: ComplexMatrix,
    /// Single-user precoder.
    pub precoder: ComplexVector,
    /// Full-power SINR estimate used for link adaptation.
    pub su_sinr: f64,
    /// Upper bound on interference-plus-noise covariance (URLLC users).
    pub interference_bound: ComplexMatrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UserView {
    pub id: UserId,
    pub kind: Kind,
    /// Single beam representing the user across the band.
    pub wideband: ComplexVector,
    pub prbs: Vec<PrbView>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CellView {
    pub users: Vec<UserView>,
}

impl CellView {
    fn user(&self, id: UserId) -> Option<&UserView> {
        self.users.iter().find(|u| u.id == id)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GrantMode {
    /// Alone on a PRB that carries no eMBB data.
    Su,
    /// Overwrites an eMBB transmission.
    Punctured,
    /// Shares the PRB with an eMBB user on its own precoder.
    Mu,
    /// Shares the PRB with an eMBB user projected onto the reference beam.
    Alpha,
}

impl GrantMode {
    pub fn group_size(self) -> usize {
        match self {
            GrantMode::Su | GrantMode::Punctured => 1,
            GrantMode::Mu | GrantMode::Alpha => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum EmbbBeam {
    Native,
    /// Unit precoder along the reference beam, with the victim's retained energy fraction.
    Projected { precoder: ComplexVector, retained: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbbUse {
    pub user: UserId,
    pub beam: EmbbBeam,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UrllcUse {
    pub user: UserId,
    pub packet: u64,
    pub mode: GrantMode,
    pub precoder: ComplexVector,
}

/// Occupancy of one (PRB, short-TTI) cell.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PrbSlot {
    pub embb: Option<EmbbUse>,
    pub urllc: Option<UrllcUse>,
}

impl PrbSlot {
    pub fn alpha_flag(&self) -> bool {
        matches!(&self.urllc, Some(u) if u.mode == GrantMode::Alpha)
    }

    pub fn puncture_flag(&self) -> bool {
        matches!(&self.urllc, Some(u) if u.mode == GrantMode::Punctured)
    }

    pub fn owners(&self) -> Vec<UserId> {
        let mut v: Vec<UserId> = self.embb.iter().map(|e| e.user).chain(self.urllc.iter().map(|u| u.user)).collect();
        v.sort_unstable();
        v
    }

    /// Number of users sharing transmit power on this PRB.
    pub fn group_size(&self) -> usize {
        self.embb.is_some() as usize + self.urllc.is_some() as usize
    }
}

/// Allocation of one cell over one eMBB TTI.
#[derive(Clone, Debug, PartialEq)]
pub struct AllocationGrid {
    n_prb: usize,
    n_slots: usize,
    embb_owner: Vec<Option<UserId>>,
    slots: Vec<PrbSlot>,
}

impl AllocationGrid {
    pub fn new(n_prb: usize, n_slots: usize) -> Self {
        assert!(n_prb > 0 && n_slots > 0);
        Self { n_prb, n_slots, embb_owner: vec![None; n_prb], slots: vec![PrbSlot::default(); n_prb * n_slots] }
    }

    pub fn n_prb(&self) -> usize {
        self.n_prb
    }

    pub fn n_slots(&self) -> usize {
        self.n_slots
    }

    pub fn embb_owner(&self, prb: usize) -> Option<UserId> {
        self.embb_owner[prb]
    }

    pub fn slot(&self, slot: usize) -> &[PrbSlot] {
        &self.slots[slot * self.n_prb..(slot + 1) * self.n_prb]
    }

    fn slot_mut(&mut self, slot: usize) -> &mut [PrbSlot] {
        &mut self.slots[slot * self.n_prb..(slot + 1) * self.n_prb]
    }

    fn reset(&mut self) {
        self.embb_owner.fill(None);
        self.slots.fill(PrbSlot::default());
    }

    /// PRB-slots allocated to `user` as eMBB base owner over the TTI.
    pub fn allocated_prb_slots(&self, user: UserId) -> usize {
        self.embb_owner.iter().filter(|o| **o == Some(user)).count() * self.n_slots
    }

    /// Checks structural invariants; returns a description of the first violation.
    pub fn validate(&self) -> std::result::Result<(), String> {
        for s in 0..self.n_slots {
            for (p, cell) in self.slot(s).iter().enumerate() {
                let here = format!("slot {s} prb {p}");
                if cell.alpha_flag() && cell.puncture_flag() {
                    return Err(format!("{here}: alpha and puncture both set"));
                }
                if let Some(u) = &cell.urllc {
                    match u.mode {
                        GrantMode::Alpha => {
                            if !matches!(&cell.embb, Some(EmbbUse { beam: EmbbBeam::Projected { .. }, .. })) {
                                return Err(format!("{here}: alpha grant without projected eMBB partner"));
                            }
                        }
                        GrantMode::Mu => {
                            if !matches!(&cell.embb, Some(EmbbUse { beam: EmbbBeam::Native, .. })) {
                                return Err(format!("{here}: MU grant without eMBB partner"));
                            }
                        }
                        GrantMode::Punctured => {
                            if cell.embb.is_some() || self.embb_owner[p].is_none() {
                                return Err(format!("{here}: puncture without a displaced eMBB owner"));
                            }
                        }
                        GrantMode::Su => {
                            if cell.embb.is_some() || self.embb_owner[p].is_some() {
                                return Err(format!("{here}: SU grant on an eMBB PRB"));
                            }
                        }
                    }
                }
                if let Some(e) = &cell.embb {
                    if self.embb_owner[p] != Some(e.user) {
                        return Err(format!("{here}: eMBB user is not the TTI owner"));
                    }
                    if matches!(e.beam, EmbbBeam::Projected { .. }) && !cell.alpha_flag() {
                        return Err(format!("{here}: projected eMBB without alpha grant"));
                    }
                }
                if cell.group_size() > 2 {
                    return Err(format!("{here}: more than two owners"));
                }
            }
        }
        Ok(())
    }
}

/// URLLC resources granted to one packet in one short-TTI and mode.
#[derive(Clone, Debug, PartialEq)]
pub struct UrllcGrant {
    pub packet: u64,
    pub user: UserId,
    pub mode: GrantMode,
    pub prbs: Vec<usize>,
    pub precoders: Vec<ComplexVector>,
    /// Effective full-power SINR estimate over `prbs`.
    pub est_sinr: f64,
    /// Bits carried by this grant.
    pub bits: f64,
}

impl UrllcGrant {
    /// Realized effective SINR (at the shared power) needed to decode.
    pub fn threshold(&self, outage_gap: f64) -> f64 {
        self.est_sinr / (self.mode.group_size() as f64 * outage_gap)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotCounters {
    /// Requests that needed PRBs already carrying eMBB data.
    pub contention: u64,
    /// Contention requests that punctured at least one PRB.
    pub fallback: u64,
    pub mu_grants: u64,
    pub alpha_grants: u64,
    pub punctured_prbs: u64,
    pub mu_prbs: u64,
    pub alpha_prbs: u64,
    /// Puncturing forced on the null-space policy.
    pub anomalies: u64,
    pub degenerate_victims: u64,
    /// Requests that received nothing this short-TTI.
    pub unserved: u64,
}

impl SlotCounters {
    pub fn add(&mut self, o: &SlotCounters) {
        self.contention += o.contention;
        self.fallback += o.fallback;
        self.mu_grants += o.mu_grants;
        self.alpha_grants += o.alpha_grants;
        self.punctured_prbs += o.punctured_prbs;
        self.mu_prbs += o.mu_prbs;
        self.alpha_prbs += o.alpha_prbs;
        self.anomalies += o.anomalies;
        self.degenerate_victims += o.degenerate_victims;
        self.unserved += o.unserved;
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SlotDecision {
    pub grants: Vec<UrllcGrant>,
    pub counters: SlotCounters,
}

struct Candidate {
    prb: usize,
    est: f64,
    precoder: ComplexVector,
    beam: EmbbBeam,
}

fn bits_for(n: usize, eff: f64, group: usize, gap: f64) -> f64 {
    RE_PER_PRB_SLOT * n as f64 * prb_rate(eff / gap, group)
}

/// Takes candidates in order until the grant covers `remaining` bits or `cap` PRBs are used.
fn pick(cands: Vec<Candidate>, group: usize, remaining: f64, cap: usize, params: &SchedulerParams) -> Result<Vec<Candidate>> {
    let mut chosen: Vec<Candidate> = Vec::new();
    let mut ests: Vec<f64> = Vec::new();
    for c in cands {
        if chosen.len() >= cap {
            break;
        }
        if c.est <= 0.0 {
            continue;
        }
        ests.push(c.est);
        chosen.push(c);
        let eff = eesm(&ests, params.eesm_beta)?;
        if bits_for(chosen.len(), eff, group, params.outage_gap) >= remaining {
            break;
        }
    }
    Ok(chosen)
}

fn sorted_by_est(mut v: Vec<Candidate>) -> Vec<Candidate> {
    v.sort_by(|a, b| b.est.total_cmp(&a.est).then(a.prb.cmp(&b.prb)));
    v
}

/// Per-PRB precoder and worst-case SINR of a URLLC user that nulls the
/// reference direction at its receiver.
pub fn alpha_link(prb: &PrbView, v_ref: &ComplexVector) -> Result<(ComplexVector, f64)> {
    let g = prb.channel.mul_vec(v_ref);
    if g.norm() == 0.0 {
        return Err(Error::DegenerateNullSpace);
    }
    let h_su = prb.channel.mul_vec(&prb.precoder);
    let u0 = prb.interference_bound.solve(&h_su)?;
    let u = deorient_against(&u0, &g)?.normalized()?;
    let v = prb.channel.hermitian_mul_vec(&u).normalized()?;
    let est = fixed_combiner_sinr(&u, &prb.channel.mul_vec(&v), &prb.interference_bound, 1.0);
    Ok((v, est))
}

struct Ctx<'a> {
    policy: Policy,
    params: &'a SchedulerParams,
    view: &'a CellView,
    slot: usize,
}

impl Ctx<'_> {
    fn user_view(&self, id: UserId) -> Result<&UserView> {
        self.view.user(id).ok_or_else(|| invalid(format!("no view for user {id}")))
    }

    /// eMBB users holding at least one PRB still free of URLLC in this slot.
    fn active_embb(&self, grid: &AllocationGrid) -> Vec<UserId> {
        let mut ids: Vec<UserId> = grid
            .slot(self.slot)
            .iter()
            .filter(|c| c.urllc.is_none())
            .filter_map(|c| c.embb.as_ref().map(|e| e.user))
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    fn available_prbs_of(&self, grid: &AllocationGrid, user: UserId) -> Vec<usize> {
        grid.slot(self.slot)
            .iter()
            .enumerate()
            .filter(|(_, c)| c.urllc.is_none() && matches!(&c.embb, Some(e) if e.user == user))
            .map(|(p, _)| p)
            .collect()
    }

    fn commit(
        &self,
        grid: &mut AllocationGrid,
        req: &SchedulingRequest,
        mode: GrantMode,
        chosen: Vec<Candidate>,
        remaining: &mut f64,
        out: &mut SlotDecision,
    ) -> Result<usize> {
        if chosen.is_empty() {
            return Ok(0);
        }
        let ests: Vec<f64> = chosen.iter().map(|c| c.est).collect();
        let eff = eesm(&ests, self.params.eesm_beta)?;
        let cap = bits_for(chosen.len(), eff, mode.group_size(), self.params.outage_gap);
        let bits = cap.min(*remaining);
        *remaining -= bits;
        let n = chosen.len();
        let mut prbs = Vec::with_capacity(n);
        let mut precoders = Vec::with_capacity(n);
        let cells = grid.slot_mut(self.slot);
        for c in chosen {
            let cell = &mut cells[c.prb];
            match mode {
                GrantMode::Punctured => cell.embb = None,
                GrantMode::Alpha => {
                    if let Some(e) = cell.embb.as_mut() {
                        e.beam = c.beam;
                    }
                }
                GrantMode::Su | GrantMode::Mu => {}
            }
            cell.urllc = Some(UrllcUse { user: req.user, packet: req.packet, mode, precoder: c.precoder.clone() });
            prbs.push(c.prb);
            precoders.push(c.precoder);
        }
        match mode {
            GrantMode::Punctured => out.counters.punctured_prbs += n as u64,
            GrantMode::Mu => {
                out.counters.mu_prbs += n as u64;
                out.counters.mu_grants += 1;
            }
            GrantMode::Alpha => {
                out.counters.alpha_prbs += n as u64;
                out.counters.alpha_grants += 1;
            }
            GrantMode::Su => {}
        }
        out.grants.push(UrllcGrant { packet: req.packet, user: req.user, mode, prbs, precoders, est_sinr: eff, bits });
        Ok(n)
    }

    fn serve_free(&self, grid: &mut AllocationGrid, req: &SchedulingRequest, uv: &UserView, remaining: &mut f64, cap: usize, out: &mut SlotDecision) -> Result<usize> {
        let cands: Vec<Candidate> = grid
            .slot(self.slot)
            .iter()
            .enumerate()
            .filter(|(p, c)| c.urllc.is_none() && c.embb.is_none() && grid.embb_owner(*p).is_none())
            .map(|(p, _)| Candidate { prb: p, est: uv.prbs[p].su_sinr, precoder: uv.prbs[p].precoder.clone(), beam: EmbbBeam::Native })
            .collect();
        let chosen = pick(sorted_by_est(cands), 1, *remaining, cap, self.params)?;
        self.commit(grid, req, GrantMode::Su, chosen, remaining, out)
    }

    fn puncture(&self, grid: &mut AllocationGrid, req: &SchedulingRequest, uv: &UserView, remaining: &mut f64, cap: usize, out: &mut SlotDecision) -> Result<usize> {
        // Victims by PRBs held this TTI, most first; ties to the lowest id.
        let mut victims = self.active_embb(grid);
        victims.sort_by_key(|&v| (std::cmp::Reverse(grid.allocated_prb_slots(v)), v));
        let mut cands = Vec::new();
        for v in victims {
            let own = self
                .available_prbs_of(grid, v)
                .into_iter()
                .map(|p| Candidate { prb: p, est: uv.prbs[p].su_sinr, precoder: uv.prbs[p].precoder.clone(), beam: EmbbBeam::Native })
                .collect();
            cands.extend(sorted_by_est(own));
        }
        let chosen = pick(cands, 1, *remaining, cap, self.params)?;
        self.commit(grid, req, GrantMode::Punctured, chosen, remaining, out)
    }

    fn pair(&self, grid: &mut AllocationGrid, req: &SchedulingRequest, uv: &UserView, remaining: &mut f64, cap: usize, out: &mut SlotDecision) -> Result<usize> {
        let active = self.active_embb(grid);
        let mut pool: Vec<(UserId, &ComplexVector)> = Vec::new();
        for id in active {
            let ev = self.user_view(id)?;
            pool.push((id, &ev.wideband));
        }
        let mut cands = Vec::new();
        let share = 1.0 / GrantMode::Mu.group_size() as f64;
        while let Some(partner) = try_mu_pairing(&uv.wideband, &pool, self.params.gamma)? {
            pool.retain(|(id, _)| *id != partner);
            let ev = self.user_view(partner)?;
            let mut own = Vec::new();
            for p in self.available_prbs_of(grid, partner) {
                // The partner's beam is known here, so its leakage enters the estimate.
                let prb = &uv.prbs[p];
                let mut bound = prb.interference_bound.clone();
                bound.add_outer(&prb.channel.mul_vec(&ev.prbs[p].precoder), share);
                let est = mmse_sinr(&prb.channel.mul_vec(&prb.precoder), &bound, 1.0)?;
                own.push(Candidate { prb: p, est, precoder: prb.precoder.clone(), beam: EmbbBeam::Native });
            }
            cands.extend(sorted_by_est(own));
        }
        let chosen = pick(cands, 2, *remaining, cap, self.params)?;
        self.commit(grid, req, GrantMode::Mu, chosen, remaining, out)
    }

    fn project(&self, grid: &mut AllocationGrid, req: &SchedulingRequest, uv: &UserView, remaining: &mut f64, cap: usize, out: &mut SlotDecision) -> Result<usize> {
        let v_ref = &self.params.v_ref;
        let active = self.active_embb(grid);
        let mut pool: Vec<(UserId, &ComplexVector)> = Vec::new();
        for id in active {
            pool.push((id, &self.user_view(id)?.wideband));
        }
        let mut cands = Vec::new();
        while let Some(victim) = nsbps_select_victim(&pool, v_ref)? {
            pool.retain(|(id, _)| *id != victim);
            let ev = self.user_view(victim)?;
            let mut own = Vec::new();
            for p in self.available_prbs_of(grid, victim) {
                let native = &ev.prbs[p].precoder;
                let Ok(projected) = projected_precoder(native, v_ref) else { continue };
                let Ok((precoder, est)) = alpha_link(&uv.prbs[p], v_ref) else { continue };
                let retained = native.dot(&projected).norm_sqr();
                own.push(Candidate { prb: p, est, precoder, beam: EmbbBeam::Projected { precoder: projected, retained } });
            }
            if own.is_empty() {
                out.counters.degenerate_victims += 1;
            }
            cands.extend(sorted_by_est(own));
        }
        let chosen = pick(cands, 2, *remaining, cap, self.params)?;
        self.commit(grid, req, GrantMode::Alpha, chosen, remaining, out)
    }

    fn contend(&self, grid: &mut AllocationGrid, req: &SchedulingRequest, uv: &UserView, remaining: &mut f64, cap: usize, out: &mut SlotDecision) -> Result<usize> {
        let mut used = 0;
        match self.policy {
            Policy::Wpf => {}
            Policy::Ps => {
                used += self.puncture(grid, req, uv, remaining, cap, out)?;
            }
            Policy::Mups => {
                used += self.pair(grid, req, uv, remaining, cap, out)?;
                if *remaining > 0.0 && used < cap {
                    used += self.puncture(grid, req, uv, remaining, cap - used, out)?;
                }
            }
            Policy::Nsbps => {
                used += self.pair(grid, req, uv, remaining, cap, out)?;
                if *remaining > 0.0 && used < cap {
                    used += self.project(grid, req, uv, remaining, cap - used, out)?;
                }
                // Only when no victim could be projected at all.
                if *remaining > 0.0 && used == 0 {
                    let n = self.puncture(grid, req, uv, remaining, cap, out)?;
                    if n > 0 {
                        out.counters.anomalies += 1;
                    }
                    used += n;
                }
            }
        }
        Ok(used)
    }
}

/// PF allocation of every PRB not reserved for URLLC, using the reported SU rates.
fn allocate_embb(grid: &mut AllocationGrid, view: &CellView, history: &RateHistory, params: &SchedulerParams) -> Result<()> {
    let reserved: Vec<bool> = grid.slot(0).iter().map(|c| c.urllc.is_some()).collect();
    for (p, taken) in reserved.into_iter().enumerate() {
        if taken {
            continue;
        }
        let mut best: Option<(UserId, f64)> = None;
        for u in view.users.iter().filter(|u| u.kind == Kind::Embb) {
            let r = prb_rate(u.prbs[p].su_sinr / params.outage_gap, 1);
            let m = wpf_metric(r, history.get(u.id), Kind::Embb, params)?;
            let better = match best {
                None => true,
                Some((bid, bm)) => m > bm || (m == bm && u.id < bid),
            };
            if better {
                best = Some((u.id, m));
            }
        }
        grid.embb_owner[p] = best.map(|(id, _)| id);
    }
    let n_prb = grid.n_prb;
    for s in 0..grid.n_slots {
        for p in 0..n_prb {
            let owner = grid.embb_owner[p];
            let cell = &mut grid.slots[s * n_prb + p];
            if cell.urllc.is_none() {
                cell.embb = owner.map(|user| EmbbUse { user, beam: EmbbBeam::Native });
            }
        }
    }
    Ok(())
}

/// Schedules one short-TTI. Slot 0 of each eMBB TTI also resets the grid,
/// serves waiting URLLC on the empty band and then runs PF for eMBB.
///
/// `requests` hold the URLLC demand eligible in this slot; their
/// `queued_payload` is reduced by what gets granted.
pub fn schedule_slot(
    policy: Policy,
    params: &SchedulerParams,
    view: &CellView,
    requests: &mut [SchedulingRequest],
    grid: &mut AllocationGrid,
    history: &RateHistory,
    slot: usize,
) -> Result<SlotDecision> {
    if slot >= grid.n_slots {
        return Err(invalid("slot outside the TTI"));
    }
    let ctx = Ctx { policy, params, view, slot };
    let mut out = SlotDecision::default();
    if slot == 0 {
        grid.reset();
    }

    // URLLC order: WPF metric on each request's best reported PRB.
    let mut order: Vec<(usize, f64)> = Vec::with_capacity(requests.len());
    for (i, r) in requests.iter().enumerate() {
        if r.kind != Kind::Urllc || !(r.queued_payload > 0.0) {
            continue;
        }
        let uv = ctx.user_view(r.user)?;
        let best = uv.prbs.iter().map(|p| p.su_sinr).fold(0.0, f64::max);
        let m = wpf_metric(prb_rate(best / params.outage_gap, 1), history.get(r.user), Kind::Urllc, params)?;
        order.push((i, m));
    }
    order.sort_by(|a, b| {
        b.1.total_cmp(&a.1)
            .then(requests[a.0].user.cmp(&requests[b.0].user))
            .then(requests[a.0].packet.cmp(&requests[b.0].packet))
    });

    let n_prb = grid.n_prb;
    // First pass shares the band evenly between waiting requests so each gets
    // something this slot; the second pass hands out what is left.
    let fair_cap = n_prb.div_ceil(order.len().max(1)).max(1);
    let mut served = vec![0usize; requests.len()];
    let mut contended = vec![false; requests.len()];
    let mut punctured = vec![false; requests.len()];
    for pass in 0..2 {
        for &(i, _) in &order {
            let req = requests[i].clone();
            let mut remaining = req.queued_payload;
            if !(remaining > 0.0) {
                continue;
            }
            let cap = if pass == 0 { fair_cap } else { n_prb };
            let uv = ctx.user_view(req.user)?;
            let mut used = ctx.serve_free(grid, &req, uv, &mut remaining, cap, &mut out)?;
            if remaining > 0.0 && used < cap && slot > 0 && policy != Policy::Wpf {
                let before = out.counters.punctured_prbs;
                let n = ctx.contend(grid, &req, uv, &mut remaining, cap - used, &mut out)?;
                contended[i] |= n > 0;
                punctured[i] |= out.counters.punctured_prbs > before;
                used += n;
            }
            served[i] += used;
            requests[i].queued_payload = remaining;
        }
    }
    out.counters.contention = contended.iter().filter(|&&c| c).count() as u64;
    out.counters.fallback = punctured.iter().filter(|&&c| c).count() as u64;
    out.counters.unserved = order.iter().filter(|(i, _)| served[*i] == 0).count() as u64;

    if slot == 0 {
        allocate_embb(grid, view, history, params)?;
    }
    Ok(out)
}

pub fn schedule_tti_wpf(requests: &mut [SchedulingRequest], view: &CellView, grid: &mut AllocationGrid, history: &RateHistory, params: &SchedulerParams, slot: usize) -> Result<SlotDecision> {
    schedule_slot(Policy::Wpf, params, view, requests, grid, history, slot)
}

pub fn schedule_tti_ps(requests: &mut [SchedulingRequest], view: &CellView, grid: &mut AllocationGrid, history: &RateHistory, params: &SchedulerParams, slot: usize) -> Result<SlotDecision> {
    schedule_slot(Policy::Ps, params, view, requests, grid, history, slot)
}

pub fn schedule_tti_mups(requests: &mut [SchedulingRequest], view: &CellView, grid: &mut AllocationGrid, history: &RateHistory, params: &SchedulerParams, slot: usize) -> Result<SlotDecision> {
    schedule_slot(Policy::Mups, params, view, requests, grid, history, slot)
}

pub fn schedule_tti_nsbps(requests: &mut [SchedulingRequest], view: &CellView, grid: &mut AllocationGrid, history: &RateHistory, params: &SchedulerParams, slot: usize) -> Result<SlotDecision> {
    schedule_slot(Policy::Nsbps, params, view, requests, grid, history, slot)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::link::{dominant_precoder, wideband_precoder};
    use crate::rng::{complex_normal, substream, Purpose};
    use crate::spatial::{steering_vector, C64};
    use proptest::prelude::*;

    const N_TX: usize = 4;
    const N_PRB: usize = 4;
    const N_SLOTS: usize = 7;

    fn params(gamma: f64) -> SchedulerParams {
        SchedulerParams {
            gamma,
            beta_llc: 1e6,
            beta_mbb: 1.0,
            outage_gap: 10f64.powf(0.1),
            eesm_beta: 5.0,
            v_ref: steering_vector(N_TX, 0.5, std::f64::consts::FRAC_PI_2).unwrap(),
        }
    }

    fn random_channel(seed: u64) -> ComplexMatrix {
        let mut rng = substream(seed, Purpose::Test, 0, 0);
        ComplexMatrix::from_fn(2, N_TX, |_, _| complex_normal(&mut rng))
    }

    fn user_view(id: UserId, kind: Kind, seed: u64) -> UserView {
        let hs: Vec<ComplexMatrix> = (0..N_PRB).map(|p| random_channel(seed * 100 + p as u64)).collect();
        let prbs = hs
            .iter()
            .map(|h| {
                let precoder = dominant_precoder(h).unwrap();
                let bound = ComplexMatrix::identity(2);
                let su_sinr = mmse_sinr(&h.mul_vec(&precoder), &bound, 1.0).unwrap();
                PrbView { channel: h.clone(), precoder, su_sinr, interference_bound: bound }
            })
            .collect();
        UserView { id, kind, wideband: wideband_precoder(&hs).unwrap(), prbs }
    }

    /// Two eMBB users (0, 1) and one URLLC user (2).
    fn cell() -> CellView {
        CellView { users: vec![user_view(0, Kind::Embb, 1), user_view(1, Kind::Embb, 2), user_view(2, Kind::Urllc, 3)] }
    }

    fn request(payload: f64) -> SchedulingRequest {
        SchedulingRequest { user: 2, kind: Kind::Urllc, queued_payload: payload, arrival_time: 1, packet: 0 }
    }

    /// Grid after slot 0 with no URLLC demand: every PRB belongs to eMBB.
    fn busy_grid(view: &CellView, p: &SchedulerParams, history: &RateHistory) -> AllocationGrid {
        let mut grid = AllocationGrid::new(N_PRB, N_SLOTS);
        schedule_slot(Policy::Wpf, p, view, &mut [], &mut grid, history, 0).unwrap();
        assert!((0..N_PRB).all(|q| grid.embb_owner(q).is_some()));
        grid
    }

    fn one_prb_bits(view: &CellView, p: &SchedulerParams) -> f64 {
        let best = view.users[2].prbs.iter().map(|q| q.su_sinr).fold(0.0, f64::max);
        bits_for(1, best, 1, p.outage_gap)
    }

    #[test]
    fn wpf_queues_when_the_band_is_taken() {
        let (view, p) = (cell(), params(0.9));
        let history = RateHistory::new(3, 100.0, 1e-3);
        let mut grid = busy_grid(&view, &p, &history);
        let before = grid.clone();
        let mut reqs = [request(400.0)];
        let d = schedule_slot(Policy::Wpf, &p, &view, &mut reqs, &mut grid, &history, 1).unwrap();
        assert!(d.grants.is_empty());
        assert_eq!(d.counters.unserved, 1);
        assert_eq!(reqs[0].queued_payload, 400.0);
        assert_eq!(grid, before);
    }

    #[test]
    fn slot_zero_serves_urllc_before_embb() {
        let (view, p) = (cell(), params(0.9));
        let history = RateHistory::new(3, 100.0, 1e-3);
        let mut grid = AllocationGrid::new(N_PRB, N_SLOTS);
        let mut reqs = [request(1.0)];
        let d = schedule_slot(Policy::Wpf, &p, &view, &mut reqs, &mut grid, &history, 0).unwrap();
        assert_eq!(d.grants.len(), 1);
        assert_eq!(d.grants[0].mode, GrantMode::Su);
        let q = d.grants[0].prbs[0];
        assert_eq!(grid.embb_owner(q), None);
        assert_eq!(reqs[0].queued_payload, 0.0);
        grid.validate().unwrap();
    }

    #[test]
    fn puncturing_takes_exactly_the_needed_prbs() {
        let (mut view, p) = (cell(), params(0.9));
        // Equal estimates on every PRB make the PRB count exact.
        for q in &mut view.users[2].prbs {
            q.su_sinr = 20.0;
        }
        let history = RateHistory::new(3, 100.0, 1e-3);
        let mut grid = busy_grid(&view, &p, &history);
        let per_prb = one_prb_bits(&view, &p);
        let mut reqs = [request(1.5 * per_prb)];
        let d = schedule_slot(Policy::Ps, &p, &view, &mut reqs, &mut grid, &history, 3).unwrap();
        assert_eq!(d.counters.punctured_prbs, 2);
        assert_eq!(d.counters.fallback, 1);
        assert_eq!(d.grants.len(), 1);
        assert!((d.grants[0].bits - 1.5 * per_prb).abs() < 1e-9);
        assert_eq!(reqs[0].queued_payload, 0.0);
        let hit: Vec<usize> = (0..N_PRB).filter(|&q| grid.slot(3)[q].puncture_flag()).collect();
        assert_eq!(hit, d.grants[0].prbs);
        // Other slots keep their eMBB data.
        for s in (0..N_SLOTS).filter(|&s| s != 3) {
            assert!(grid.slot(s).iter().all(|c| c.embb.is_some() && c.urllc.is_none()));
        }
        grid.validate().unwrap();
    }

    #[test]
    fn puncturing_hits_the_largest_holder_first() {
        let (view, p) = (cell(), params(0.9));
        let history = RateHistory::new(3, 100.0, 1e-3);
        let mut grid = busy_grid(&view, &p, &history);
        let biggest = if grid.allocated_prb_slots(0) >= grid.allocated_prb_slots(1) { 0 } else { 1 };
        let mut reqs = [request(1.0)];
        let d = schedule_slot(Policy::Ps, &p, &view, &mut reqs, &mut grid, &history, 2).unwrap();
        assert_eq!(grid.embb_owner(d.grants[0].prbs[0]), Some(biggest));
        grid.validate().unwrap();
    }

    #[test]
    fn mups_without_orthogonal_partners_is_puncturing() {
        let (view, p) = (cell(), params(1.0));
        let history = RateHistory::new(3, 100.0, 1e-3);
        for payload in [1.0, 2000.0, 1e5] {
            let mut ga = busy_grid(&view, &p, &history);
            let mut gb = ga.clone();
            let mut ra = [request(payload)];
            let mut rb = [request(payload)];
            let a = schedule_slot(Policy::Ps, &p, &view, &mut ra, &mut ga, &history, 4).unwrap();
            let b = schedule_slot(Policy::Mups, &p, &view, &mut rb, &mut gb, &history, 4).unwrap();
            assert_eq!(a, b);
            assert_eq!(ga, gb);
            assert_eq!(ra, rb);
        }
    }

    #[test]
    fn mups_pairs_with_an_orthogonal_partner() {
        let (mut view, p) = (cell(), params(0.5));
        // Put eMBB user 0 on a beam orthogonal to the URLLC wideband beam.
        let w = view.users[2].wideband.clone();
        let mut orth = vec![C64::new(0.0, 0.0); N_TX];
        orth[0] = -w.as_slice()[1].conj();
        orth[1] = w.as_slice()[0].conj();
        let orth = ComplexVector::new(orth).unwrap().normalized().unwrap();
        view.users[0].wideband = orth;
        let history = RateHistory::new(3, 100.0, 1e-3);
        let mut grid = busy_grid(&view, &p, &history);
        let mut reqs = [request(1.0)];
        let d = schedule_slot(Policy::Mups, &p, &view, &mut reqs, &mut grid, &history, 1).unwrap();
        if (0..N_PRB).any(|q| grid.embb_owner(q) == Some(0)) {
            assert_eq!(d.counters.mu_grants, 1);
            assert_eq!(d.grants[0].mode, GrantMode::Mu);
            let q = d.grants[0].prbs[0];
            assert_eq!(grid.slot(1)[q].owners(), vec![0, 2]);
        }
        grid.validate().unwrap();
    }

    #[test]
    fn nsbps_shares_in_the_arrival_slot() {
        let (view, p) = (cell(), params(1.0));
        let history = RateHistory::new(3, 100.0, 1e-3);
        for slot in 1..N_SLOTS {
            let mut grid = busy_grid(&view, &p, &history);
            let mut reqs = [request(400.0)];
            let d = schedule_slot(Policy::Nsbps, &p, &view, &mut reqs, &mut grid, &history, slot).unwrap();
            assert_eq!(d.counters.unserved, 0);
            assert_eq!(d.counters.punctured_prbs, 0);
            assert!(d.grants.iter().all(|g| g.mode == GrantMode::Alpha));
            for g in &d.grants {
                for &q in &g.prbs {
                    let c = &grid.slot(slot)[q];
                    assert!(c.alpha_flag() && !c.puncture_flag());
                    let Some(EmbbUse { beam: EmbbBeam::Projected { precoder, retained }, .. }) = &c.embb else {
                        panic!("victim not projected");
                    };
                    assert!((precoder.dot(&p.v_ref).norm() - 1.0).abs() < 1e-12);
                    assert!((0.0..=1.0 + 1e-12).contains(retained));
                }
            }
            grid.validate().unwrap();
        }
    }

    #[test]
    fn alpha_link_combiner_nulls_the_reference_beam() {
        let p = params(1.0);
        let uv = user_view(2, Kind::Urllc, 9);
        for prb in &uv.prbs {
            let (v, est) = alpha_link(prb, &p.v_ref).unwrap();
            assert!(v.is_unit());
            assert!(est > 0.0 && est <= prb.su_sinr * (1.0 + 1e-9));
        }
    }

    #[test]
    fn validate_reports_broken_grids() {
        let (view, p) = (cell(), params(0.9));
        let history = RateHistory::new(3, 100.0, 1e-3);
        let grid = busy_grid(&view, &p, &history);
        let urllc = |mode| Some(UrllcUse { user: 2, packet: 0, mode, precoder: p.v_ref.clone() });

        let mut g = grid.clone();
        g.slots[N_PRB].urllc = urllc(GrantMode::Su);
        assert!(g.validate().unwrap_err().contains("SU grant"));

        let mut g = grid.clone();
        g.slots[N_PRB].urllc = urllc(GrantMode::Punctured);
        assert!(g.validate().unwrap_err().contains("puncture"));

        let mut g = grid.clone();
        g.slots[N_PRB].urllc = urllc(GrantMode::Alpha);
        assert!(g.validate().unwrap_err().contains("alpha grant"));

        let mut g = grid.clone();
        g.slots[0].embb.as_mut().unwrap().beam = EmbbBeam::Projected { precoder: p.v_ref.clone(), retained: 0.5 };
        assert!(g.validate().unwrap_err().contains("projected"));

        let mut g = grid.clone();
        g.embb_owner[0] = Some(7);
        assert!(g.validate().unwrap_err().contains("owner"));
    }

    /// Brute force over every assignment of 4 PRBs to 3 eMBB users.
    #[test]
    fn embb_allocation_maximizes_summed_pf() {
        let users: Vec<UserView> = (0..3).map(|i| user_view(i, Kind::Embb, 20 + i as u64)).collect();
        let view = CellView { users: users.clone() };
        let p = params(0.9);
        let mut history = RateHistory::new(3, 10.0, 1e-3);
        history.update(1, 40.0);
        history.update(2, 5.0);
        let mut grid = AllocationGrid::new(N_PRB, N_SLOTS);
        schedule_slot(Policy::Wpf, &p, &view, &mut [], &mut grid, &history, 0).unwrap();

        let metric = |u: usize, q: usize| prb_rate(users[u].prbs[q].su_sinr / p.outage_gap, 1) / history.get(u as UserId);
        let mut best = (f64::MIN, vec![]);
        for code in 0..81usize {
            let assign: Vec<usize> = (0..N_PRB).map(|q| code / 3usize.pow(q as u32) % 3).collect();
            let total: f64 = assign.iter().enumerate().map(|(q, &u)| metric(u, q)).sum();
            if total > best.0 {
                best = (total, assign);
            }
        }
        let got: Vec<usize> = (0..N_PRB).map(|q| grid.embb_owner(q).unwrap() as usize).collect();
        assert_eq!(got, best.1);
    }

    #[test]
    fn wpf_weight_ranks_urllc_above_embb() {
        let p = params(0.9);
        let u = wpf_metric(0.5, 10.0, Kind::Urllc, &p).unwrap();
        let e = wpf_metric(5.0, 0.1, Kind::Embb, &p).unwrap();
        assert!(u > e);
        assert!(pf_metric(1.0, 0.0).is_err());
    }

    #[test]
    fn policy_names_round_trip() {
        for policy in Policy::ALL {
            assert_eq!(policy.name().parse::<Policy>().unwrap(), policy);
            assert_eq!(policy.to_string().to_uppercase().parse::<Policy>().unwrap(), policy);
        }
        assert!("fifo".parse::<Policy>().is_err());
    }

    fn unit_vec(n: usize) -> impl Strategy<Value = ComplexVector> {
        prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), n)
            .prop_filter("non-zero", |v| v.iter().any(|(a, b)| a.abs() + b.abs() > 1e-3))
            .prop_map(|v| ComplexVector::new(v.into_iter().map(|(a, b)| C64::new(a, b)).collect()).unwrap().normalized().unwrap())
    }

    fn overlap(a: &ComplexVector, b: &ComplexVector) -> f64 {
        let ip: C64 = a.iter().zip(b.iter()).map(|(x, y)| x.conj() * y).sum();
        ip.norm_sqr() / (a.norm_sqr() * b.norm_sqr())
    }

    proptest! {
        #[test]
        fn pairing_matches_brute_force(u in unit_vec(N_TX), pool in prop::collection::vec(unit_vec(N_TX), 0..6), gamma in 0.0f64..1.0) {
            let entries: Vec<(UserId, &ComplexVector)> = pool.iter().enumerate().map(|(i, v)| (i as UserId, v)).collect();
            let got = try_mu_pairing(&u, &entries, gamma).unwrap();
            let scores: Vec<f64> = pool.iter().map(|v| 1.0 - overlap(&u, v)).collect();
            let eligible: Vec<usize> = (0..pool.len()).filter(|&i| scores[i] >= gamma + 1e-9).collect();
            match got {
                None => prop_assert!(eligible.is_empty()),
                Some(id) => {
                    let id = id as usize;
                    prop_assert!(scores[id] >= gamma - 1e-9);
                    prop_assert!(scores.iter().all(|s| *s <= scores[id] + 1e-9));
                }
            }
        }

        #[test]
        fn victim_is_the_closest_to_the_reference(pool in prop::collection::vec(unit_vec(N_TX), 1..6), r in unit_vec(N_TX)) {
            let entries: Vec<(UserId, &ComplexVector)> = pool.iter().enumerate().map(|(i, v)| (i as UserId, v)).collect();
            let id = nsbps_select_victim(&entries, &r).unwrap().unwrap() as usize;
            let dist: Vec<f64> = pool.iter().map(|v| (1.0 - overlap(v, &r)).max(0.0).sqrt()).collect();
            prop_assert!(dist.iter().all(|d| dist[id] <= d + 1e-9));
        }

        #[test]
        fn every_policy_leaves_a_valid_grid(seed in 0u64..200, payload in 1.0f64..20_000.0, slot in 1usize..N_SLOTS, gamma in 0.0f64..=1.0) {
            let view = CellView { users: vec![user_view(0, Kind::Embb, seed), user_view(1, Kind::Embb, seed + 7), user_view(2, Kind::Urllc, seed + 13)] };
            let p = params(gamma);
            let history = RateHistory::new(3, 100.0, 1e-3);
            for policy in Policy::ALL {
                let mut grid = busy_grid(&view, &p, &history);
                let mut reqs = [request(payload)];
                let d = schedule_slot(policy, &p, &view, &mut reqs, &mut grid, &history, slot).unwrap();
                prop_assert!(grid.validate().is_ok(), "{policy}: {:?}", grid.validate());
                let granted: f64 = d.grants.iter().map(|g| g.bits).sum();
                prop_assert!((granted + reqs[0].queued_payload - payload).abs() < 1e-6 * payload);
                if policy == Policy::Nsbps {
                    prop_assert_eq!(d.counters.unserved, 0);
                }
                if policy == Policy::Wpf {
                    prop_assert!(d.grants.is_empty());
                }
            }
        }
    }
}
