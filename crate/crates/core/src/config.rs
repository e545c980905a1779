//! Scenario configuration, loadable from TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::channel::{ClusterRayConfig, PathlossModel};
use crate::error::{io_err, Error, Result};
use crate::geometry::hex_shape;
use crate::scheduler::Policy;
use crate::traffic::SlotTiming;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub n_cells: usize,
    pub inter_site_distance: f64,
    pub n_tx: usize,
    pub n_rx: usize,
    pub n_prb: usize,
    /// eMBB and URLLC users per cell.
    pub omega: [usize; 2],
    /// URLLC packet arrivals per second per URLLC user.
    pub arrival_rate: f64,
    pub payload_bits: f64,
    pub gamma: f64,
    pub beta_llc: f64,
    pub beta_mbb: f64,
    pub outage_gap_db: f64,
    pub eesm_beta: f64,
    /// Direction of the reference beam, radians from the array axis.
    pub v_ref_angle: f64,
    pub seed: u64,
    /// Simulated short-TTIs.
    pub ttis: u64,
    pub policy: Policy,
    pub max_harq_attempts: u32,
    /// Arrivals are dropped while the oldest waiting packet is at least this old.
    pub deadline_ms: f64,
    pub cqi_period_ttis: u64,
    pub cqi_delay_ttis: u64,
    pub pf_horizon_ttis: f64,
    /// Extra short-TTIs after the horizon to let queued packets finish.
    pub drain_slots: u64,
    /// eMBB TTIs between channel dump snapshots.
    pub channel_dump_period_ttis: u64,
    pub channel: ClusterRayConfig,
    pub pathloss: PathlossModel,
    pub timing: SlotTiming,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            n_cells: 3,
            inter_site_distance: 500.0,
            n_tx: 8,
            n_rx: 2,
            n_prb: 25,
            omega: [5, 5],
            arrival_rate: 250.0,
            payload_bits: 400.0,
            gamma: 0.9,
            beta_llc: 1e6,
            beta_mbb: 1.0,
            outage_gap_db: 1.0,
            eesm_beta: 5.0,
            v_ref_angle: std::f64::consts::FRAC_PI_2,
            seed: 1,
            ttis: 100_000,
            policy: Policy::Nsbps,
            max_harq_attempts: 4,
            deadline_ms: 1.0,
            cqi_period_ttis: 5,
            cqi_delay_ttis: 2,
            pf_horizon_ttis: 100.0,
            drain_slots: 2000,
            channel_dump_period_ttis: 1000,
            channel: ClusterRayConfig::default(),
            pathloss: PathlossModel::default(),
            timing: SlotTiming::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn outage_gap(&self) -> f64 {
        10f64.powf(self.outage_gap_db / 10.0)
    }

    pub fn embb_users(&self) -> usize {
        self.omega[0]
    }

    pub fn urllc_users(&self) -> usize {
        self.omega[1]
    }

    pub fn users_per_cell(&self) -> usize {
        self.omega[0] + self.omega[1]
    }

    pub fn horizon_ms(&self) -> f64 {
        self.ttis as f64 * self.timing.slot_ms()
    }

    /// Checks every field and reports all problems at once.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let mut need = |ok: bool, field: &str, what: &str| {
            if !ok {
                errs.push(format!("{field}: {what}"));
            }
        };
        need(self.n_cells >= 1, "n_cells", "must be >= 1");
        need(
            self.n_cells == 0 || hex_shape(self.n_cells).is_some(),
            "n_cells",
            "must be of the form i²+ij+j² (1, 3, 4, 7, 9, 12, 13, 16, 19, 21, ...)",
        );
        need(self.inter_site_distance > 0.0 && self.inter_site_distance.is_finite(), "inter_site_distance", "must be > 0");
        need(self.n_tx >= 1, "n_tx", "must be >= 1");
        need(self.n_rx >= 1, "n_rx", "must be >= 1");
        need(self.n_rx <= self.n_tx, "n_rx", "must not exceed n_tx");
        need(self.n_prb >= 1, "n_prb", "must be >= 1");
        need(self.omega[0] + self.omega[1] >= 1, "omega", "needs at least one user per cell");
        need(self.arrival_rate > 0.0 && self.arrival_rate.is_finite(), "arrival_rate", "must be > 0");
        need(self.payload_bits > 0.0 && self.payload_bits.is_finite(), "payload_bits", "must be > 0");
        need((0.0..=1.0).contains(&self.gamma), "gamma", "must lie in [0, 1]");
        need(self.beta_llc > 0.0 && self.beta_llc.is_finite(), "beta_llc", "must be > 0");
        need(self.beta_mbb > 0.0 && self.beta_mbb.is_finite(), "beta_mbb", "must be > 0");
        need(self.outage_gap_db >= 0.0 && self.outage_gap_db.is_finite(), "outage_gap_db", "must be >= 0");
        need(self.eesm_beta > 0.0 && self.eesm_beta.is_finite(), "eesm_beta", "must be > 0");
        need(self.v_ref_angle.is_finite(), "v_ref_angle", "must be finite");
        need(self.max_harq_attempts >= 1, "max_harq_attempts", "must be >= 1");
        need(self.deadline_ms > 0.0, "deadline_ms", "must be > 0");
        need(self.cqi_period_ttis >= 1, "cqi_period_ttis", "must be >= 1");
        need(self.pf_horizon_ttis >= 1.0, "pf_horizon_ttis", "must be >= 1");
        need(self.channel_dump_period_ttis >= 1, "channel_dump_period_ttis", "must be >= 1");
        let t = &self.timing;
        need(t.symbols_per_ms >= 1, "timing.symbols_per_ms", "must be >= 1");
        need(t.symbols_per_slot >= 1, "timing.symbols_per_slot", "must be >= 1");
        need(t.slots_per_tti >= 1, "timing.slots_per_tti", "must be >= 1");
        need(self.pathloss.exponent >= 2.0 && self.pathloss.exponent <= 6.0, "pathloss.exponent", "must lie in [2, 6]");
        need(self.pathloss.shadowing_std_db >= 0.0, "pathloss.shadowing_std_db", "must be >= 0");
        need(self.pathloss.min_distance > 0.0, "pathloss.min_distance", "must be > 0");
        if let Err(Error::Config(more)) = self.channel.validate() {
            errs.extend(more);
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// Parses `K_mbb,K_llc`.
pub fn parse_omega(text: &str) -> Result<[usize; 2]> {
    let bad = || Error::Config(vec![format!("omega: expected K_mbb,K_llc, got {text:?}")]);
    let (a, b) = text.split_once(',').ok_or_else(bad)?;
    let a = a.trim().parse().map_err(|_| bad())?;
    let b = b.trim().parse().map_err(|_| bad())?;
    Ok([a, b])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = ScenarioConfig::default();
        cfg.validate().unwrap();
        let back = ScenarioConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg = ScenarioConfig::from_toml_str("omega = [10, 10]\npolicy = \"wpf\"\n[channel]\nn_rays = 4\n").unwrap();
        assert_eq!(cfg.omega, [10, 10]);
        assert_eq!(cfg.policy, Policy::Wpf);
        assert_eq!(cfg.channel.n_rays, 4);
        assert_eq!(cfg.n_prb, 25);
    }

    #[test]
    fn validation_names_every_bad_field() {
        let cfg = ScenarioConfig { n_cells: 2, gamma: 1.5, n_prb: 0, ..ScenarioConfig::default() };
        let Err(Error::Config(errs)) = cfg.validate() else { panic!("expected config error") };
        let text = errs.join("\n");
        for field in ["n_cells", "gamma", "n_prb"] {
            assert!(text.contains(field), "{text}");
        }
        assert!(ScenarioConfig::from_toml_str("bogus = 1").is_err());
    }

    #[test]
    fn omega_parsing() {
        assert_eq!(parse_omega("5,10").unwrap(), [5, 10]);
        assert_eq!(parse_omega(" 20 , 5 ").unwrap(), [20, 5]);
        assert!(parse_omega("5").is_err());
        assert!(parse_omega("a,b").is_err());
    }
}
