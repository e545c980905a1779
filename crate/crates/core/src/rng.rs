//! Named random substreams derived from one master seed.
//!
//! Every consumer of randomness asks for its own stream keyed by purpose and
//! by the (user, cell) it belongs to, so the order in which streams are used
//! never changes what any of them produce.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::spatial::C64;

pub type SimRng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Purpose {
    Placement = 1,
    Shadowing = 2,
    ChannelInit = 3,
    ChannelEvolution = 4,
    Traffic = 5,
    Test = 6,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Stream for `purpose` attached to the pair (`a`, `b`), typically (user, cell).
pub fn substream(master_seed: u64, purpose: Purpose, a: u64, b: u64) -> SimRng {
    let mut rng = SimRng::seed_from_u64(master_seed);
    let key = splitmix(splitmix(splitmix(purpose as u64) ^ a) ^ b.rotate_left(32));
    rng.set_stream(key);
    rng
}

/// Circularly symmetric complex normal draw with unit variance.
pub fn complex_normal(rng: &mut SimRng) -> C64 {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    C64::new(re * s, im * s)
}
