//! Multi-cell downlink simulator for URLLC/eMBB coexistence.
//!
//! Four schedulers share one simulated world: weighted proportional fair
//! (URLLC waits for free PRBs), punctured scheduling, MU punctured
//! scheduling, and null-space preemptive scheduling, where a victim eMBB
//! precoder is projected onto a pre-agreed reference beam so the URLLC
//! receiver can null it without knowing the victim.

pub mod channel;
pub mod config;
pub mod engine;
pub mod error;
pub mod geometry;
pub mod link;
pub mod metrics;
pub mod output;
pub mod rng;
pub mod scheduler;
pub mod spatial;
pub mod traffic;
pub mod world;

pub use error::{Error, Result};
