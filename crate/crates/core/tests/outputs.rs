use std::fs;
use std::path::Path;

use nullspace_sched::channel::parse_channel_records;
use nullspace_sched::config::ScenarioConfig;
use nullspace_sched::engine::{compare_policies, run, simulate, NoTrace};
use nullspace_sched::metrics::{latency_percentile, PacketRecord};
use nullspace_sched::output::{emit_outputs, packets_csv, parse_grid_records, read_packet_records, FileTrace, Summary};
use nullspace_sched::scheduler::Policy;
use nullspace_sched::traffic::LatencyParts;

const GOLDEN: &str = include_str!("fixtures/packets_three.csv");

fn small(policy: Policy) -> ScenarioConfig {
    let mut cfg = ScenarioConfig::from_toml_str(include_str!("fixtures/small.toml")).unwrap();
    cfg.policy = policy;
    cfg
}

fn three_packets() -> Vec<PacketRecord> {
    let l = |q: f64| LatencyParts { queue: q, frame_alignment: 0.1, tx: 1.0 / 7.0, bsp: 3.0 / 14.0, uep: 3.0 / 14.0 };
    vec![
        PacketRecord { packet_id: 0, cell: 0, user: 3, arrival_tti: 2, latency: Some(l(0.0)), harq_attempts: 1, alpha_used: false, punctured: false },
        PacketRecord { packet_id: 1, cell: 1, user: 7, arrival_tti: 5, latency: Some(l(2.0 / 7.0)), harq_attempts: 2, alpha_used: true, punctured: false },
        PacketRecord { packet_id: 2, cell: 0, user: 4, arrival_tti: 9, latency: None, harq_attempts: 4, alpha_used: false, punctured: true },
    ]
}

fn read_dir_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn packet_file_matches_golden_bytes() {
    assert_eq!(packets_csv(&three_packets()), GOLDEN);
    assert_eq!(read_packet_records(GOLDEN).unwrap(), three_packets());
}

#[test]
fn repeated_runs_write_identical_files() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small(Policy::Nsbps);
    for name in ["a", "b"] {
        emit_outputs(&run(&cfg).unwrap(), &tmp.path().join(name)).unwrap();
    }
    let a = read_dir_files(&tmp.path().join("a"));
    let b = read_dir_files(&tmp.path().join("b"));
    assert_eq!(a.len(), 5);
    assert_eq!(a, b);
}

#[test]
fn summary_agrees_with_packet_file() {
    let tmp = tempfile::tempdir().unwrap();
    let m = run(&small(Policy::Ps)).unwrap();
    emit_outputs(&m, tmp.path()).unwrap();
    let packets = read_packet_records(&fs::read_to_string(tmp.path().join("packets.csv")).unwrap()).unwrap();
    let summary: Summary = serde_json::from_str(&fs::read_to_string(tmp.path().join("summary.json")).unwrap()).unwrap();
    let delivered = packets.iter().filter(|p| p.delivered()).count() as u64;
    assert_eq!(summary.packets.generated, packets.len() as u64);
    assert_eq!(summary.packets.delivered, delivered);
    assert_eq!(summary.packets.dropped, packets.len() as u64 - delivered);
    let samples: Vec<f64> = packets.iter().map(|p| p.total_latency()).collect();
    let p999 = latency_percentile(&samples, 0.999).ok().filter(|v| v.is_finite());
    assert_eq!(summary.latency_ms.p999, p999);
    let users = fs::read_to_string(tmp.path().join("users.csv")).unwrap();
    let total: f64 = users.lines().skip(1).map(|l| l.split(',').nth(3).unwrap().parse::<f64>().unwrap()).sum();
    let cells: f64 = summary.throughput_mbps.cells.iter().sum();
    assert!((total - cells).abs() <= 1e-9 * cells.max(1.0));
}

#[test]
fn policies_run_apart_see_the_same_channels() {
    let tmp = tempfile::tempdir().unwrap();
    let mut dumps = Vec::new();
    for policy in [Policy::Wpf, Policy::Nsbps] {
        let path = tmp.path().join(format!("{policy}.txt"));
        let mut trace = FileTrace::new(None, Some(path.clone())).unwrap();
        simulate(&small(policy), &[policy], &mut trace).unwrap();
        trace.finish().unwrap();
        dumps.push(fs::read(&path).unwrap());
    }
    assert!(!dumps[0].is_empty());
    assert_eq!(dumps[0], dumps[1]);
    let records = parse_channel_records(std::str::from_utf8(&dumps[0]).unwrap()).unwrap();
    let cfg = small(Policy::Wpf);
    let users = cfg.n_cells * cfg.users_per_cell();
    assert_eq!(records.len() % (users * cfg.n_prb), 0);
}

#[test]
fn compare_mode_matches_separate_runs() {
    let cfg = small(Policy::Wpf);
    let c = compare_policies(&cfg, &Policy::ALL, &mut NoTrace).unwrap();
    for r in &c.runs {
        let alone = run(&ScenarioConfig { policy: r.policy, ..cfg.clone() }).unwrap();
        assert_eq!(packets_csv(&alone.packets), packets_csv(&r.packets), "{}", r.policy);
    }
    assert_eq!(c.deltas.len(), 4);
    let ps = c.deltas.iter().find(|d| d.policy == Policy::Ps).unwrap();
    assert_eq!(ps.cell_gain_mbps, 0.0);
}

#[test]
fn grid_trace_is_readable_and_consistent() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("grid.jsonl");
    let mut trace = FileTrace::new(Some(path.clone()), None).unwrap();
    let cfg = small(Policy::Nsbps);
    let m = simulate(&cfg, &[Policy::Nsbps], &mut trace).unwrap().remove(0);
    trace.finish().unwrap();
    let grid = parse_grid_records(&fs::read_to_string(&path).unwrap()).unwrap();
    let alpha = grid.iter().filter(|r| r.alpha).count() as u64;
    assert_eq!(alpha, m.counters.scheduling.alpha_prbs);
    assert!(grid.iter().all(|r| r.owners.len() <= 2 && !(r.alpha && r.punctured)));
    assert!(grid.iter().filter(|r| r.alpha).all(|r| r.projected && r.owners.len() == 2));
}
