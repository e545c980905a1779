//! Everything policy runs share: user drops, channels, CSI reports and traffic.
//!
//! Policies never draw from these streams, so several policies can step
//! through one world in lockstep and see identical channels and arrivals.

use std::collections::VecDeque;
use std::f64::consts::TAU;

use rand::Rng;

use crate::channel::{draw_large_scale, generate_channel, write_channel_records, ArrayDims, ChannelMatrixSet, LargeScale, LinkAngles};
use crate::config::ScenarioConfig;
use crate::error::{invalid, Result};
use crate::geometry::HexTorus;
use crate::link::{dominant_precoder, mmse_sinr, wideband_precoder};
use crate::rng::{substream, Purpose, SimRng};
use crate::scheduler::{CellView, Kind, PrbView, UserId, UserView};
use crate::spatial::{steering_vector, ComplexMatrix, ComplexVector};
use crate::traffic::{generate_urllc_arrivals, UrllcPacket};

const MAX_DROP_TRIES: usize = 1000;

#[derive(Clone, Debug, PartialEq)]
pub struct UserInfo {
    pub id: UserId,
    pub cell: usize,
    pub kind: Kind,
    pub position: [f64; 2],
    /// Receive array orientation, radians.
    pub orientation: f64,
}

pub struct World {
    cfg: ScenarioConfig,
    torus: HexTorus,
    users: Vec<UserInfo>,
    /// Index `user * n_cells + cell`.
    links: Vec<ChannelMatrixSet>,
    evolution: Vec<SimRng>,
    packets: Vec<UrllcPacket>,
    next_packet: usize,
    views: Vec<CellView>,
    pending: VecDeque<(u64, Vec<CellView>)>,
    v_ref: ComplexVector,
    tti: u64,
}

fn sample_offset(torus: &HexTorus, min_distance: f64, rng: &mut SimRng) -> [f64; 2] {
    let r = torus.cell_radius();
    loop {
        let p = [rng.random_range(-r..r), rng.random_range(-r..r)];
        if torus.in_hexagon(p) && p[0].hypot(p[1]) >= min_distance {
            return p;
        }
    }
}

impl World {
    pub fn new(cfg: &ScenarioConfig) -> Result<Self> {
        cfg.validate()?;
        let torus = HexTorus::new(cfg.n_cells, cfg.inter_site_distance).ok_or_else(|| invalid("cell count has no hex layout"))?;
        let n_cells = cfg.n_cells;
        let per_cell = cfg.users_per_cell();
        let seed = cfg.seed;
        let dims = ArrayDims { n_tx: cfg.n_tx, n_rx: cfg.n_rx, n_prb: cfg.n_prb };

        let mut users = Vec::with_capacity(n_cells * per_cell);
        let mut links = Vec::with_capacity(n_cells * n_cells * per_cell);
        let mut evolution = Vec::with_capacity(links.capacity());
        for cell in 0..n_cells {
            let site = torus.sites()[cell];
            for k in 0..per_cell {
                let id = (cell * per_cell + k) as UserId;
                let kind = if k < cfg.embb_users() { Kind::Embb } else { Kind::Urllc };
                let mut place = substream(seed, Purpose::Placement, id as u64, 0);
                let mut shadow = substream(seed, Purpose::Shadowing, id as u64, 0);
                // Redraw until the home cell is the strongest, so every cell keeps its user count.
                let mut drop: Option<([f64; 2], Vec<LargeScale>)> = None;
                for _ in 0..MAX_DROP_TRIES {
                    let off = sample_offset(&torus, cfg.pathloss.min_distance, &mut place);
                    let pos = [site[0] + off[0], site[1] + off[1]];
                    let mut ls = Vec::with_capacity(n_cells);
                    for s in torus.sites() {
                        ls.push(draw_large_scale(torus.displacement(*s, pos), [0.0, 0.0], &cfg.pathloss, &mut shadow)?);
                    }
                    let best = (0..n_cells).max_by(|&a, &b| ls[a].gain().total_cmp(&ls[b].gain())).unwrap_or(cell);
                    let ok = best == cell;
                    drop = Some((pos, ls));
                    if ok {
                        break;
                    }
                }
                let (position, ls) = drop.expect("at least one drop attempt");
                let orientation = place.random_range(0.0..TAU);
                for (c, s) in torus.sites().iter().enumerate() {
                    let d = torus.displacement(*s, position);
                    let angles = LinkAngles { departure: d[1].atan2(d[0]), arrival: (-d[1]).atan2(-d[0]) - orientation };
                    let mut rng = substream(seed, Purpose::ChannelInit, id as u64, c as u64);
                    links.push(generate_channel(&ls[c], &cfg.channel, angles, dims, &mut rng)?);
                    evolution.push(substream(seed, Purpose::ChannelEvolution, id as u64, c as u64));
                }
                users.push(UserInfo { id, cell, kind, position, orientation });
            }
        }

        let mut packets = Vec::new();
        let horizon_ms = cfg.horizon_ms();
        for u in users.iter().filter(|u| u.kind == Kind::Urllc) {
            let mut rng = substream(seed, Purpose::Traffic, u.id as u64, 0);
            for mut p in generate_urllc_arrivals(cfg.arrival_rate, cfg.payload_bits, horizon_ms, &cfg.timing, &mut rng)? {
                p.user = u.id;
                p.cell = u.cell as u32;
                p.deadline_ms = cfg.deadline_ms;
                packets.push(p);
            }
        }
        packets.sort_by(|a, b| a.arrival_ms.total_cmp(&b.arrival_ms).then(a.user.cmp(&b.user)));
        for (i, p) in packets.iter_mut().enumerate() {
            p.id = i as u64;
        }

        let v_ref = steering_vector(cfg.n_tx, cfg.channel.antenna_spacing, cfg.v_ref_angle)?;
        let mut world = Self {
            cfg: cfg.clone(),
            torus,
            users,
            links,
            evolution,
            packets,
            next_packet: 0,
            views: Vec::new(),
            pending: VecDeque::new(),
            v_ref,
            tti: 0,
        };
        // The report taken at TTI 0 is visible at once so the first TTIs have CSI.
        world.views = world.build_views()?;
        Ok(world)
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.cfg
    }

    pub fn torus(&self) -> &HexTorus {
        &self.torus
    }

    pub fn users(&self) -> &[UserInfo] {
        &self.users
    }

    pub fn packets(&self) -> &[UrllcPacket] {
        &self.packets
    }

    pub fn v_ref(&self) -> &ComplexVector {
        &self.v_ref
    }

    pub fn tti(&self) -> u64 {
        self.tti
    }

    /// Scheduler view of `cell` from the most recent visible report.
    pub fn view(&self, cell: usize) -> &CellView {
        &self.views[cell]
    }

    /// Current channel from `cell` to `user` on `prb`.
    pub fn channel(&self, user: UserId, cell: usize, prb: usize) -> &ComplexMatrix {
        self.links[user as usize * self.cfg.n_cells + cell].prb(prb)
    }

    pub fn link(&self, user: UserId, cell: usize) -> &ChannelMatrixSet {
        &self.links[user as usize * self.cfg.n_cells + cell]
    }

    /// Local index of a user within its cell's view.
    pub fn local_index(&self, user: UserId) -> usize {
        user as usize % self.cfg.users_per_cell()
    }

    /// Moves to the next eMBB TTI: evolves fading, takes a CSI report when
    /// due and installs any report whose delay has elapsed.
    pub fn advance_tti(&mut self) -> Result<()> {
        self.tti += 1;
        for (link, rng) in self.links.iter_mut().zip(self.evolution.iter_mut()) {
            link.advance_tti(rng);
        }
        if self.tti % self.cfg.cqi_period_ttis == 0 {
            let views = self.build_views()?;
            self.pending.push_back((self.tti + self.cfg.cqi_delay_ttis, views));
        }
        while self.pending.front().is_some_and(|(at, _)| *at <= self.tti) {
            let (_, views) = self.pending.pop_front().expect("checked");
            self.views = views;
        }
        Ok(())
    }

    /// Indices of packets that become eligible by `slot` and were not returned before.
    pub fn arrivals_up_to(&mut self, slot: u64) -> std::ops::Range<usize> {
        let start = self.next_packet;
        while self.next_packet < self.packets.len() && self.packets[self.next_packet].arrival_slot <= slot {
            self.next_packet += 1;
        }
        start..self.next_packet
    }

    pub fn arrivals_pending(&self) -> bool {
        self.next_packet < self.packets.len()
    }

    fn build_views(&self) -> Result<Vec<CellView>> {
        let n_cells = self.cfg.n_cells;
        let n_prb = self.cfg.n_prb;
        let n_rx = self.cfg.n_rx;
        let n_tx = self.cfg.n_tx as f64;
        let mut views = vec![CellView::default(); n_cells];
        for u in &self.users {
            let own = self.link(u.id, u.cell);
            let mut prbs = Vec::with_capacity(n_prb);
            for p in 0..n_prb {
                let h = own.prb(p);
                let precoder = dominant_precoder(h)?;
                // URLLC adapts to the worst case of every neighbour beaming at
                // it; eMBB to an isotropic neighbour beam.
                let scale = if u.kind == Kind::Urllc { 1.0 } else { 1.0 / n_tx };
                let mut bound = ComplexMatrix::identity(n_rx);
                for c in (0..n_cells).filter(|&c| c != u.cell) {
                    bound.add_outer_gram(self.channel(u.id, c, p), scale);
                }
                let su_sinr = mmse_sinr(&h.mul_vec(&precoder), &bound, 1.0)?;
                prbs.push(PrbView { channel: h.clone(), precoder, su_sinr, interference_bound: bound });
            }
            let wideband = wideband_precoder(&own.matrices())?;
            views[u.cell].users.push(UserView { id: u.id, kind: u.kind, wideband, prbs });
        }
        Ok(views)
    }

    /// Serving-link dump of the current TTI.
    pub fn dump_channels(&self, out: &mut String) {
        for u in &self.users {
            write_channel_records(out, self.tti, u.id, u.cell as u32, self.link(u.id, u.cell));
        }
    }
}
