//! Cluster-ray MIMO channels with pathloss, shadowing and temporal evolution.

use std::cell::OnceCell;
use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, Exp, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::{complex_normal, SimRng};
use crate::spatial::{ComplexMatrix, C64};

/// Distance-dependent pathloss with log-normal shadowing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathlossModel {
    /// Link-budget coefficient in dB: transmit power per PRB minus the noise
    /// floor per PRB minus the pathloss intercept.
    pub coefficient_db: f64,
    pub exponent: f64,
    pub shadowing_std_db: f64,
    /// Distances below this are clamped, meters.
    pub min_distance: f64,
}

impl Default for PathlossModel {
    fn default() -> Self {
        // 29 dBm per PRB, -112.4 dBm noise per PRB (9 dB NF), 15.3 dB intercept.
        Self {
            coefficient_db: 29.0 + 112.45 - 15.3,
            exponent: 3.76,
            shadowing_std_db: 8.0,
            min_distance: 35.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LargeScale {
    pub pathloss_coefficient: f64,
    pub shadow_fading: f64,
    pub distance: f64,
    pub pathloss_exponent: f64,
}

impl LargeScale {
    /// Received-power coefficient ℓ·d^(−ϱ)·μ.
    pub fn gain(&self) -> f64 {
        self.pathloss_coefficient * self.distance.powf(-self.pathloss_exponent) * self.shadow_fading
    }
}

/// Pathloss between two points, with one shadowing draw from `rng`.
pub fn draw_large_scale(
    user_position: [f64; 2],
    cell_position: [f64; 2],
    model: &PathlossModel,
    rng: &mut SimRng,
) -> Result<LargeScale> {
    let d = (user_position[0] - cell_position[0]).hypot(user_position[1] - cell_position[1]);
    if !(d > 0.0) || !d.is_finite() {
        return Err(invalid("user and cell positions coincide"));
    }
    if !(2.0..=6.0).contains(&model.exponent) {
        return Err(invalid("pathloss exponent must lie in [2, 6]"));
    }
    let z: f64 = StandardNormal.sample(rng);
    Ok(LargeScale {
        pathloss_coefficient: 10f64.powf(model.coefficient_db / 10.0),
        shadow_fading: 10f64.powf(model.shadowing_std_db * z / 10.0),
        distance: d.max(model.min_distance),
        pathloss_exponent: model.exponent,
    })
}

/// How small-scale fading evolves from one eMBB TTI to the next.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Coherence {
    Static,
    /// Independent cluster gains every TTI.
    PerTti,
    /// First-order Gauss-Markov cluster gains with Jakes correlation at the given speed.
    Doppler { speed_mps: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterRayConfig {
    pub n_clusters: usize,
    pub n_rays: usize,
    /// Standard deviation of per-ray angle jitter around the cluster angle, radians.
    pub angle_spread: f64,
    /// Standard deviation of cluster departure angles around the line of sight, radians.
    pub cluster_departure_spread: f64,
    /// Half-width of the uniform cluster arrival angle spread, radians.
    pub cluster_arrival_spread: f64,
    /// Mean of the exponential cluster delay distribution, seconds.
    pub delay_spread: f64,
    /// Antenna spacing in wavelengths, both ends.
    pub antenna_spacing: f64,
    pub prb_bandwidth_hz: f64,
    pub carrier_hz: f64,
    /// eMBB TTI length, seconds.
    pub tti_s: f64,
    pub coherence: Coherence,
}

impl Default for ClusterRayConfig {
    fn default() -> Self {
        Self {
            n_clusters: 8,
            n_rays: 10,
            angle_spread: 2f64.to_radians(),
            cluster_departure_spread: 10f64.to_radians(),
            cluster_arrival_spread: 60f64.to_radians(),
            delay_spread: 363e-9,
            antenna_spacing: 0.5,
            prb_bandwidth_hz: 180e3,
            carrier_hz: 2e9,
            tti_s: 1e-3,
            coherence: Coherence::Doppler { speed_mps: 3.0 / 3.6 },
        }
    }
}

impl ClusterRayConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.n_clusters == 0 {
            errs.push("channel.n_clusters: must be >= 1".to_string());
        }
        if self.n_rays == 0 {
            errs.push("channel.n_rays: must be >= 1".to_string());
        }
        for (name, v) in [
            ("angle_spread", self.angle_spread),
            ("cluster_departure_spread", self.cluster_departure_spread),
            ("cluster_arrival_spread", self.cluster_arrival_spread),
            ("delay_spread", self.delay_spread),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                errs.push(format!("channel.{name}: must be finite and >= 0"));
            }
        }
        for (name, v) in [
            ("antenna_spacing", self.antenna_spacing),
            ("prb_bandwidth_hz", self.prb_bandwidth_hz),
            ("carrier_hz", self.carrier_hz),
            ("tti_s", self.tti_s),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                errs.push(format!("channel.{name}: must be finite and > 0"));
            }
        }
        if let Coherence::Doppler { speed_mps } = self.coherence {
            if !(speed_mps >= 0.0) || !speed_mps.is_finite() {
                errs.push("channel.coherence.speed_mps: must be finite and >= 0".to_string());
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Per-TTI correlation of cluster gains under the Jakes model.
    pub fn memory(&self) -> f64 {
        match self.coherence {
            Coherence::Static => 1.0,
            Coherence::PerTti => 0.0,
            Coherence::Doppler { speed_mps } => {
                let doppler = speed_mps * self.carrier_hz / 299_792_458.0;
                bessel_j0(2.0 * PI * doppler * self.tti_s)
            }
        }
    }
}

/// J0 by its power series; accurate for the small arguments used here.
pub fn bessel_j0(x: f64) -> f64 {
    let q = -(x * x) / 4.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..60 {
        term *= q / (k * k) as f64;
        sum += term;
        if term.abs() < 1e-17 * sum.abs() {
            break;
        }
    }
    sum
}

/// Mean departure and arrival directions of a link, radians from each array axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinkAngles {
    pub departure: f64,
    pub arrival: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ArrayDims {
    pub n_tx: usize,
    pub n_rx: usize,
    pub n_prb: usize,
}

/// Per-PRB channel matrices of one link plus the state needed to evolve them.
/// Each PRB's matrix is rebuilt on first read after the fading moves.
#[derive(Clone, Debug)]
pub struct ChannelMatrixSet {
    matrices: Vec<OnceCell<ComplexMatrix>>,
    n_rx: usize,
    n_tx: usize,
    n_prb: usize,
    coherence: Coherence,
    memory: f64,
    gain: f64,
    cluster_gains: Vec<C64>,
    /// Ray sums per cluster, each n_rx × n_tx.
    signatures: Vec<ComplexMatrix>,
    /// Delay phase per (cluster, PRB), cluster-major.
    phases: Vec<C64>,
}

/// Draws a link's small-scale fading around the given geometry.
pub fn generate_channel(
    large_scale: &LargeScale,
    config: &ClusterRayConfig,
    angles: LinkAngles,
    dims: ArrayDims,
    rng: &mut SimRng,
) -> Result<ChannelMatrixSet> {
    config.validate()?;
    if dims.n_tx == 0 || dims.n_rx == 0 || dims.n_prb == 0 {
        return Err(invalid("array dimensions must be >= 1"));
    }
    let gain = large_scale.gain();
    if !(gain > 0.0) || !gain.is_finite() {
        return Err(invalid("large-scale gain must be positive and finite"));
    }
    let q = config.n_clusters;
    let z = config.n_rays;
    let delay = if config.delay_spread > 0.0 {
        Some(Exp::new(1.0 / config.delay_spread).map_err(|e| invalid(e.to_string()))?)
    } else {
        None
    };
    let jitter = Normal::new(0.0, config.angle_spread).map_err(|e| invalid(e.to_string()))?;
    let dep_spread =
        Normal::new(0.0, config.cluster_departure_spread).map_err(|e| invalid(e.to_string()))?;
    let ray_norm = 1.0 / (z as f64).sqrt();
    let kd = 2.0 * PI * config.antenna_spacing;

    let mut signatures = Vec::with_capacity(q);
    let mut phases = Vec::with_capacity(q * dims.n_prb);
    let mut cluster_gains = Vec::with_capacity(q);
    for _ in 0..q {
        let aod = angles.departure + dep_spread.sample(rng);
        let aoa = angles.arrival + config.cluster_arrival_spread * (2.0 * rng.random::<f64>() - 1.0);
        let mut sig = ComplexMatrix::zeros(dims.n_rx, dims.n_tx);
        for _ in 0..z {
            let ray_dep = aod + jitter.sample(rng);
            let ray_arr = aoa + jitter.sample(rng);
            let phi = 2.0 * PI * rng.random::<f64>();
            let (cd, ca) = (ray_dep.cos(), ray_arr.cos());
            for m in 0..dims.n_rx {
                for n in 0..dims.n_tx {
                    let arg = phi + kd * (n as f64 * cd + m as f64 * ca);
                    sig[(m, n)] += C64::from_polar(ray_norm, arg);
                }
            }
        }
        signatures.push(sig);
        let tau = delay.map_or(0.0, |d| d.sample(rng));
        for p in 0..dims.n_prb {
            phases.push(C64::from_polar(1.0, -2.0 * PI * p as f64 * config.prb_bandwidth_hz * tau));
        }
        cluster_gains.push(complex_normal(rng));
    }

    let set = ChannelMatrixSet {
        matrices: vec![OnceCell::new(); dims.n_prb],
        n_rx: dims.n_rx,
        n_tx: dims.n_tx,
        n_prb: dims.n_prb,
        coherence: config.coherence,
        memory: config.memory(),
        gain,
        cluster_gains,
        signatures,
        phases,
    };
    Ok(set)
}

impl ChannelMatrixSet {
    fn build(&self, p: usize) -> ComplexMatrix {
        let q = self.cluster_gains.len();
        let amp = (self.gain / q as f64).sqrt();
        let mut m = ComplexMatrix::zeros(self.n_rx, self.n_tx);
        let out = m.as_mut_slice();
        for c in 0..q {
            let coef = self.cluster_gains[c] * self.phases[c * self.n_prb + p] * amp;
            for (o, s) in out.iter_mut().zip(self.signatures[c].as_slice()) {
                *o += coef * s;
            }
        }
        m
    }

    fn invalidate(&mut self) {
        for m in &mut self.matrices {
            m.take();
        }
    }

    /// Evolves fast fading by one eMBB TTI; large-scale terms stay fixed.
    pub fn advance_tti(&mut self, rng: &mut SimRng) {
        match self.coherence {
            Coherence::Static => {}
            Coherence::PerTti => {
                for g in &mut self.cluster_gains {
                    *g = complex_normal(rng);
                }
                self.invalidate();
            }
            Coherence::Doppler { .. } => {
                let rho = self.memory;
                let innov = (1.0 - rho * rho).max(0.0).sqrt();
                for g in &mut self.cluster_gains {
                    *g = *g * rho + complex_normal(rng) * innov;
                }
                if rho < 1.0 {
                    self.invalidate();
                }
            }
        }
    }

    pub fn matrices(&self) -> Vec<ComplexMatrix> {
        (0..self.n_prb).map(|p| self.prb(p).clone()).collect()
    }

    pub fn prb(&self, p: usize) -> &ComplexMatrix {
        self.matrices[p].get_or_init(|| self.build(p))
    }

    pub fn n_prb(&self) -> usize {
        self.n_prb
    }

    pub fn coherence(&self) -> Coherence {
        self.coherence
    }

    /// Large-scale received-power coefficient of the link.
    pub fn gain(&self) -> f64 {
        self.gain
    }
}

/// One PRB of a link in a channel dump.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelRecord {
    pub tti: u64,
    pub user: u32,
    pub cell: u32,
    pub prb: u32,
    pub matrix: ComplexMatrix,
}

/// Appends one line per PRB: `tti=.. user=.. cell=.. prb=.. rows=.. cols=.. re im re im ...`.
pub fn write_channel_records(out: &mut String, tti: u64, user: u32, cell: u32, set: &ChannelMatrixSet) {
    for (p, m) in set.matrices().iter().enumerate() {
        let _ = write!(
            out,
            "tti={tti} user={user} cell={cell} prb={p} rows={} cols={}",
            m.rows(),
            m.cols()
        );
        for z in m.as_slice() {
            let _ = write!(out, " {:e} {:e}", z.re, z.im);
        }
        out.push('\n');
    }
}

fn parse_field<T: std::str::FromStr>(tok: Option<&str>, key: &str, line: usize) -> Result<T> {
    let tok = tok.ok_or_else(|| Error::Parse { line, msg: format!("missing {key}") })?;
    let val = tok
        .strip_prefix(key)
        .and_then(|t| t.strip_prefix('='))
        .ok_or_else(|| Error::Parse { line, msg: format!("expected {key}=..., got {tok:?}") })?;
    val.parse()
        .map_err(|_| Error::Parse { line, msg: format!("bad value for {key}: {val:?}") })
}

/// Reads back a dump produced by [`write_channel_records`]. Blank lines and `#` comments are skipped.
pub fn parse_channel_records(text: &str) -> Result<Vec<ChannelRecord>> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let body = raw.trim();
        if body.is_empty() || body.starts_with('#') {
            continue;
        }
        let mut toks = body.split_ascii_whitespace();
        let tti = parse_field(toks.next(), "tti", line)?;
        let user = parse_field(toks.next(), "user", line)?;
        let cell = parse_field(toks.next(), "cell", line)?;
        let prb = parse_field(toks.next(), "prb", line)?;
        let rows: usize = parse_field(toks.next(), "rows", line)?;
        let cols: usize = parse_field(toks.next(), "cols", line)?;
        let count = rows
            .checked_mul(cols)
            .filter(|&n| n > 0 && n <= 1 << 16)
            .ok_or_else(|| Error::Parse { line, msg: "unreasonable matrix shape".into() })?;
        let nums: Vec<f64> = toks
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Parse { line, msg: "bad number".into() })?;
        if nums.len() != 2 * count {
            return Err(Error::Parse {
                line,
                msg: format!("expected {} numbers, found {}", 2 * count, nums.len()),
            });
        }
        let data = nums.chunks_exact(2).map(|p| C64::new(p[0], p[1])).collect();
        let matrix = ComplexMatrix::new(rows, cols, data)
            .map_err(|e| Error::Parse { line, msg: e.to_string() })?;
        out.push(ChannelRecord { tti, user, cell, prb, matrix });
    }
    Ok(out)
}
