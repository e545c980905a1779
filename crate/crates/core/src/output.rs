//! Result files and their readers.
//!
//! Per run directory:
//! `packets.csv`, `users.csv`, `ledger_events.csv`, `latency_ccdf.csv` and
//! `summary.json`. Optional traces: `grid.jsonl` and `channels.txt`.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::engine::{Comparison, Observer};
use crate::error::{io_err, Error, Result};
use crate::metrics::{latency_ccdf, latency_percentile, LedgerSummary, PacketRecord, RunCounters, RunMetrics};
use crate::scheduler::{EmbbBeam, GrantMode, Kind, Policy, PrbSlot};
use crate::traffic::LatencyParts;
use crate::world::World;

pub const PACKET_HEADER: &str =
    "packet_id,cell,user,arrival_tti,delivered_flag,lat_q_ms,lat_fa_ms,lat_tx_ms,lat_bsp_ms,lat_uep_ms,lat_total_ms,harq_attempts,alpha_used,punctured";
pub const USER_HEADER: &str = "user,cell,kind,mean_throughput_mbps,prbs_granted,prbs_impacted";
pub const LEDGER_HEADER: &str = "user,tti,allocated,punctured,shared,projected,projection_loss,baseline_bits,actual_bits";
pub const CCDF_HEADER: &str = "latency_ms,exceedance";

fn flag(b: bool) -> u8 {
    b as u8
}

pub fn packets_csv(records: &[PacketRecord]) -> String {
    let mut s = String::from(PACKET_HEADER);
    s.push('\n');
    for r in records {
        let _ = write!(s, "{},{},{},{},{},", r.packet_id, r.cell, r.user, r.arrival_tti, flag(r.delivered()));
        match r.latency {
            Some(l) => {
                let _ = write!(s, "{},{},{},{},{},{}", l.queue, l.frame_alignment, l.tx, l.bsp, l.uep, l.total());
            }
            None => s.push_str(",,,,,inf"),
        }
        let _ = writeln!(s, ",{},{},{}", r.harq_attempts, flag(r.alpha_used), flag(r.punctured));
    }
    s
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

fn num<T: std::str::FromStr>(tok: &str, name: &str, line: usize) -> Result<T> {
    tok.trim().parse().map_err(|_| parse_err(line, format!("bad {name}: {tok:?}")))
}

fn bool_flag(tok: &str, name: &str, line: usize) -> Result<bool> {
    match tok.trim() {
        "0" => Ok(false),
        "1" => Ok(true),
        _ => Err(parse_err(line, format!("bad {name}: {tok:?}"))),
    }
}

/// Reads a per-packet file written by [`packets_csv`].
pub fn read_packet_records(text: &str) -> Result<Vec<PacketRecord>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end() == PACKET_HEADER => {}
        _ => return Err(parse_err(1, "missing or unexpected header")),
    }
    let mut out = Vec::new();
    for (i, raw) in lines {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = raw.split(',').collect();
        if f.len() != 14 {
            return Err(parse_err(line, format!("expected 14 fields, got {}", f.len())));
        }
        let delivered = bool_flag(f[4], "delivered_flag", line)?;
        let latency = if delivered {
            let l = LatencyParts {
                queue: num(f[5], "lat_q_ms", line)?,
                frame_alignment: num(f[6], "lat_fa_ms", line)?,
                tx: num(f[7], "lat_tx_ms", line)?,
                bsp: num(f[8], "lat_bsp_ms", line)?,
                uep: num(f[9], "lat_uep_ms", line)?,
            };
            let total: f64 = num(f[10], "lat_total_ms", line)?;
            if !l.total().is_finite() || (l.total() - total).abs() > 1e-9 * total.abs().max(1.0) {
                return Err(parse_err(line, "latency components do not add up to the total"));
            }
            Some(l)
        } else {
            if f[5..10].iter().any(|t| !t.trim().is_empty()) || f[10].trim() != "inf" {
                return Err(parse_err(line, "dropped packet must have empty components and inf total"));
            }
            None
        };
        out.push(PacketRecord {
            packet_id: num(f[0], "packet_id", line)?,
            cell: num(f[1], "cell", line)?,
            user: num(f[2], "user", line)?,
            arrival_tti: num(f[3], "arrival_tti", line)?,
            latency,
            harq_attempts: num(f[11], "harq_attempts", line)?,
            alpha_used: bool_flag(f[12], "alpha_used", line)?,
            punctured: bool_flag(f[13], "punctured", line)?,
        });
    }
    Ok(out)
}

pub fn users_csv(m: &RunMetrics) -> String {
    let mut s = String::from(USER_HEADER);
    s.push('\n');
    for u in &m.users {
        let _ = writeln!(s, "{},{},{},{},{},{}", u.user, u.cell, u.kind, u.mean_throughput_mbps, u.prbs_granted, u.prbs_impacted);
    }
    s
}

pub fn ledger_csv(m: &RunMetrics) -> String {
    let mut s = String::from(LEDGER_HEADER);
    s.push('\n');
    for e in &m.ledger_events {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            e.user, e.tti, e.allocated, e.punctured, e.shared, e.projected, e.projection_loss, e.baseline_bits, e.actual_bits
        );
    }
    s
}

pub fn ccdf_csv(m: &RunMetrics) -> String {
    let mut s = String::from(CCDF_HEADER);
    s.push('\n');
    for (x, p) in latency_ccdf(&m.latency_samples()) {
        let _ = writeln!(s, "{x},{p}");
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PacketTotals {
    pub generated: u64,
    pub delivered: u64,
    pub dropped: u64,
}

/// Latency statistics in ms. `null` marks a quantile that falls on dropped
/// packets or a run without packets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub mean_delivered: Option<f64>,
    pub max_delivered: Option<f64>,
    pub p50: Option<f64>,
    pub p90: Option<f64>,
    pub p99: Option<f64>,
    pub p999: Option<f64>,
    pub p99999: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThroughputSummary {
    pub mean_cell: f64,
    pub cells: Vec<f64>,
    pub mean_embb_user: f64,
    pub mean_urllc_user: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub policy: Policy,
    pub seed: u64,
    pub ttis: u64,
    pub n_cells: usize,
    pub omega: [usize; 2],
    pub packets: PacketTotals,
    pub latency_ms: LatencySummary,
    pub throughput_mbps: ThroughputSummary,
    pub counters: RunCounters,
    pub ledger: LedgerSummary,
}

fn finite(x: Result<f64>) -> Option<f64> {
    x.ok().filter(|v| v.is_finite())
}

pub fn summarize(m: &RunMetrics) -> Summary {
    let samples = m.latency_samples();
    let delivered = m.delivered_latencies();
    let q = |p: f64| finite(latency_percentile(&samples, p));
    Summary {
        policy: m.policy,
        seed: m.seed,
        ttis: m.ttis,
        n_cells: m.n_cells,
        omega: m.omega,
        packets: PacketTotals {
            generated: m.packets.len() as u64,
            delivered: delivered.len() as u64,
            dropped: (m.packets.len() - delivered.len()) as u64,
        },
        latency_ms: LatencySummary {
            mean_delivered: (!delivered.is_empty()).then(|| delivered.iter().sum::<f64>() / delivered.len() as f64),
            max_delivered: delivered.iter().copied().reduce(f64::max),
            p50: q(0.5),
            p90: q(0.9),
            p99: q(0.99),
            p999: q(0.999),
            p99999: q(0.99999),
        },
        throughput_mbps: ThroughputSummary {
            mean_cell: m.mean_cell_throughput(),
            cells: m.cell_throughput_mbps.clone(),
            mean_embb_user: m.mean_user_throughput(Kind::Embb),
            mean_urllc_user: m.mean_user_throughput(Kind::Urllc),
        },
        counters: m.counters,
        ledger: m.ledger.clone(),
    }
}

pub fn summary_json(m: &RunMetrics) -> String {
    let mut s = serde_json::to_string_pretty(&summarize(m)).expect("summary serializes");
    s.push('\n');
    s
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

/// Writes every result file of one run into `dir`, creating it if needed.
pub fn emit_outputs(m: &RunMetrics, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_file(&dir.join("packets.csv"), &packets_csv(&m.packets))?;
    write_file(&dir.join("users.csv"), &users_csv(m))?;
    write_file(&dir.join("ledger_events.csv"), &ledger_csv(m))?;
    write_file(&dir.join("latency_ccdf.csv"), &ccdf_csv(m))?;
    write_file(&dir.join("summary.json"), &summary_json(m))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonEntry {
    pub policy: Policy,
    pub mean_cell_mbps: f64,
    pub gain_over_ps_mbps: Option<f64>,
    pub gain_over_ps_rel: Option<f64>,
    pub latency_p999_ms: Option<f64>,
}

/// One subdirectory per policy plus `comparison.json`.
pub fn emit_comparison(c: &Comparison, dir: &Path) -> Result<()> {
    let mut entries = Vec::new();
    for r in &c.runs {
        emit_outputs(r, &dir.join(r.policy.name()))?;
        let d = c.deltas.iter().find(|d| d.policy == r.policy);
        entries.push(ComparisonEntry {
            policy: r.policy,
            mean_cell_mbps: r.mean_cell_throughput(),
            gain_over_ps_mbps: d.map(|d| d.cell_gain_mbps),
            gain_over_ps_rel: d.map(|d| d.cell_gain_rel),
            latency_p999_ms: finite(latency_percentile(&r.latency_samples(), 0.999)),
        });
    }
    let mut s = serde_json::to_string_pretty(&entries).expect("comparison serializes");
    s.push('\n');
    write_file(&dir.join("comparison.json"), &s)
}

/// One grid cell as written to the grid trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridRecord {
    pub policy: Policy,
    pub tti: u64,
    pub slot: usize,
    pub cell: usize,
    pub prb: usize,
    pub owners: Vec<u32>,
    pub embb: Option<u32>,
    pub urllc: Option<u32>,
    pub mode: Option<GrantMode>,
    pub projected: bool,
    pub alpha: bool,
    pub punctured: bool,
}

impl GridRecord {
    pub fn new(policy: Policy, tti: u64, slot: usize, cell: usize, prb: usize, c: &PrbSlot) -> Self {
        Self {
            policy,
            tti,
            slot,
            cell,
            prb,
            owners: c.owners(),
            embb: c.embb.as_ref().map(|e| e.user),
            urllc: c.urllc.as_ref().map(|u| u.user),
            mode: c.urllc.as_ref().map(|u| u.mode),
            projected: matches!(&c.embb, Some(e) if matches!(e.beam, EmbbBeam::Projected { .. })),
            alpha: c.alpha_flag(),
            punctured: c.puncture_flag(),
        }
    }
}

/// Reads a grid trace, one JSON object per line; blank lines are skipped.
pub fn parse_grid_records(text: &str) -> Result<Vec<GridRecord>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let r: GridRecord = serde_json::from_str(raw).map_err(|e| parse_err(i + 1, e.to_string()))?;
        if r.alpha && r.punctured {
            return Err(parse_err(i + 1, "alpha and punctured both set"));
        }
        out.push(r);
    }
    Ok(out)
}

/// Streams optional traces into files under a directory.
pub struct FileTrace {
    grid: Option<(PathBuf, std::io::BufWriter<fs::File>)>,
    channels: Option<(PathBuf, std::io::BufWriter<fs::File>)>,
    scratch: String,
}

fn open(path: PathBuf) -> Result<(PathBuf, std::io::BufWriter<fs::File>)> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let f = fs::File::create(&path).map_err(io_err(&path))?;
    Ok((path, std::io::BufWriter::new(f)))
}

impl FileTrace {
    pub fn new(grid: Option<PathBuf>, channels: Option<PathBuf>) -> Result<Self> {
        Ok(Self { grid: grid.map(open).transpose()?, channels: channels.map(open).transpose()?, scratch: String::new() })
    }

    pub fn finish(mut self) -> Result<()> {
        for (path, w) in [self.grid.as_mut(), self.channels.as_mut()].into_iter().flatten() {
            w.flush().map_err(io_err(path.as_path()))?;
        }
        Ok(())
    }
}

impl Observer for FileTrace {
    fn grid(&mut self, policy: Policy, tti: u64, slot: usize, cell: usize, cells: &[PrbSlot]) -> Result<()> {
        let Some((path, w)) = self.grid.as_mut() else { return Ok(()) };
        for (prb, c) in cells.iter().enumerate() {
            if c.group_size() == 0 {
                continue;
            }
            let line = serde_json::to_string(&GridRecord::new(policy, tti, slot, cell, prb, c)).expect("record serializes");
            writeln!(w, "{line}").map_err(io_err(path.as_path()))?;
        }
        Ok(())
    }

    fn channels(&mut self, world: &World) -> Result<()> {
        let Some((path, w)) = self.channels.as_mut() else { return Ok(()) };
        self.scratch.clear();
        world.dump_channels(&mut self.scratch);
        w.write_all(self.scratch.as_bytes()).map_err(io_err(path.as_path()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> Vec<PacketRecord> {
        let l = |q: f64| LatencyParts { queue: q, frame_alignment: 0.1, tx: 1.0 / 7.0, bsp: 3.0 / 14.0, uep: 3.0 / 14.0 };
        vec![
            PacketRecord { packet_id: 0, cell: 0, user: 3, arrival_tti: 2, latency: Some(l(0.0)), harq_attempts: 1, alpha_used: false, punctured: false },
            PacketRecord { packet_id: 1, cell: 1, user: 7, arrival_tti: 5, latency: Some(l(2.0 / 7.0)), harq_attempts: 2, alpha_used: true, punctured: false },
            PacketRecord { packet_id: 2, cell: 0, user: 4, arrival_tti: 9, latency: None, harq_attempts: 4, alpha_used: false, punctured: true },
        ]
    }

    #[test]
    fn packet_file_round_trips() {
        let recs = fixture();
        let text = packets_csv(&recs);
        assert_eq!(read_packet_records(&text).unwrap(), recs);
        assert_eq!(packets_csv(&[]), format!("{PACKET_HEADER}\n"));
    }

    #[test]
    fn packet_reader_rejects_garbage() {
        assert!(read_packet_records("").is_err());
        assert!(read_packet_records("nope\n").is_err());
        let bad = format!("{PACKET_HEADER}\n1,2,3\n");
        assert!(matches!(read_packet_records(&bad), Err(Error::Parse { line: 2, .. })));
        let inconsistent = format!("{PACKET_HEADER}\n0,0,0,0,1,1,1,1,1,1,9,1,0,0\n");
        assert!(read_packet_records(&inconsistent).is_err());
    }

    #[test]
    fn grid_record_round_trips() {
        let r = GridRecord {
            policy: Policy::Nsbps,
            tti: 3,
            slot: 2,
            cell: 1,
            prb: 4,
            owners: vec![1, 6],
            embb: Some(1),
            urllc: Some(6),
            mode: Some(GrantMode::Alpha),
            projected: true,
            alpha: true,
            punctured: false,
        };
        let line = serde_json::to_string(&r).unwrap();
        assert_eq!(parse_grid_records(&line).unwrap(), vec![r]);
        assert!(parse_grid_records("{}").is_err());
    }
}
