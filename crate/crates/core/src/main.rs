use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::Parser;

use nullspace_sched::config::{parse_omega, ScenarioConfig};
use nullspace_sched::engine::{compare_policies, simulate};
use nullspace_sched::metrics::{latency_percentile, RunMetrics};
use nullspace_sched::output::{emit_comparison, emit_outputs, FileTrace};
use nullspace_sched::scheduler::Policy;
use nullspace_sched::Result;

/// Multi-cell downlink URLLC/eMBB scheduling simulator.
#[derive(Parser, Debug)]
#[command(version, about)]
struct Cli {
    /// TOML scenario file; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_policy)]
    policy: Option<Policy>,
    #[arg(long)]
    seed: Option<u64>,
    /// Horizon in short-TTIs.
    #[arg(long)]
    ttis: Option<u64>,
    #[arg(long)]
    cells: Option<usize>,
    /// Users per cell as K_mbb,K_llc.
    #[arg(long, value_parser = parse_omega_arg)]
    omega: Option<[usize; 2]>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Run all four policies on the same world.
    #[arg(long)]
    compare: bool,
    /// Write grid.jsonl with every occupied PRB-slot.
    #[arg(long)]
    dump_grids: bool,
    /// Write channels.txt with serving-link matrices.
    #[arg(long)]
    dump_channels: bool,
}

fn parse_policy(s: &str) -> std::result::Result<Policy, String> {
    s.parse().map_err(|e: nullspace_sched::Error| e.to_string())
}

fn parse_omega_arg(s: &str) -> std::result::Result<[usize; 2], String> {
    parse_omega(s).map_err(|e| e.to_string())
}

fn line(m: &RunMetrics) -> String {
    let p999 = latency_percentile(&m.latency_samples(), 0.999).map_or("n/a".to_string(), |v| format!("{v:.3} ms"));
    format!(
        "{:>5}: cell {:.3} Mbps, p99.9 latency {}, {} packets, {} dropped",
        m.policy.name(),
        m.mean_cell_throughput(),
        p999,
        m.packets.len(),
        m.packets.iter().filter(|p| !p.delivered()).count()
    )
}

fn main_inner(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => ScenarioConfig::load(p)?,
        None => ScenarioConfig::default(),
    };
    if let Some(v) = cli.policy {
        cfg.policy = v;
    }
    if let Some(v) = cli.seed {
        cfg.seed = v;
    }
    if let Some(v) = cli.ttis {
        cfg.ttis = v;
    }
    if let Some(v) = cli.cells {
        cfg.n_cells = v;
    }
    if let Some(v) = cli.omega {
        cfg.omega = v;
    }
    cfg.validate()?;

    let start = Instant::now();
    let grid = cli.dump_grids.then(|| cli.out.join("grid.jsonl"));
    let channels = cli.dump_channels.then(|| cli.out.join("channels.txt"));
    let mut trace = FileTrace::new(grid, channels)?;
    if cli.compare {
        let c = compare_policies(&cfg, &Policy::ALL, &mut trace)?;
        trace.finish()?;
        emit_comparison(&c, &cli.out)?;
        for r in &c.runs {
            println!("{}", line(r));
        }
    } else {
        let m = simulate(&cfg, &[cfg.policy], &mut trace)?.remove(0);
        trace.finish()?;
        emit_outputs(&m, &cli.out)?;
        println!("{}", line(&m));
    }
    eprintln!("wrote {} in {:.1} s", cli.out.display(), start.elapsed().as_secs_f64());
    Ok(())
}

fn main() -> ExitCode {
    match main_inner(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
