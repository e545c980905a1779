//! Precoders, combiners and the SINR-to-rate mapping.

use crate::error::{invalid, Error, Result};
use crate::spatial::{
    deorient_against, project_onto, pseudo_inverse_rows, tol, ComplexMatrix, ComplexVector, C64,
};

/// Transmit/receive configuration of one user on one PRB.
#[derive(Clone, Debug, PartialEq)]
pub struct LinkState {
    pub precoder: ComplexVector,
    pub combiner: ComplexVector,
    pub tx_power: f64,
    pub co_scheduled: Vec<u32>,
}

impl LinkState {
    pub fn new(precoder: ComplexVector, combiner: ComplexVector, tx_power: f64) -> Result<Self> {
        if !precoder.is_unit() {
            return Err(invalid("precoder must be unit-norm"));
        }
        if !(tx_power >= 0.0) || !tx_power.is_finite() {
            return Err(invalid("transmit power must be finite and >= 0"));
        }
        Ok(Self { precoder, combiner, tx_power, co_scheduled: Vec::new() })
    }
}

/// A transmission that leaks into the target receiver.
#[derive(Clone, Copy, Debug)]
pub struct Interferer<'a> {
    /// Channel from the interferer's transmitter to the target receiver.
    pub channel: &'a ComplexMatrix,
    pub precoder: &'a ComplexVector,
    pub power: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SinrReport {
    pub per_prb_sinr: Vec<f64>,
    pub effective_sinr: f64,
    pub eesm_beta: f64,
}

impl SinrReport {
    pub fn new(per_prb_sinr: Vec<f64>, eesm_beta: f64) -> Result<Self> {
        if per_prb_sinr.iter().any(|&s| !(s > 0.0)) {
            return Err(invalid("SINRs must be positive"));
        }
        let effective_sinr = eesm(&per_prb_sinr, eesm_beta)?;
        Ok(Self { per_prb_sinr, effective_sinr, eesm_beta })
    }
}

/// Single-layer zero-forcing precoder: the pseudo-inverse column of the
/// receive dimension with the largest post-ZF gain, unit-normalized.
pub fn zf_precoder(h: &ComplexMatrix) -> Result<ComplexVector> {
    let p = pseudo_inverse_rows(h)?;
    let mut best = 0;
    let mut best_norm = f64::INFINITY;
    for j in 0..p.cols() {
        let n = (0..p.rows()).map(|i| p[(i, j)].norm_sqr()).sum::<f64>();
        // Gain after normalization is 1/‖column‖², so the shortest column wins.
        if n < best_norm * (1.0 - 1e-12) {
            best_norm = n;
            best = j;
        }
    }
    p.column(best).normalized()
}

/// Joint ZF precoders for users with single-row effective channels.
pub fn zf_group_precoders(effective_rows: &[ComplexVector]) -> Result<Vec<ComplexVector>> {
    let stacked = ComplexMatrix::from_rows(effective_rows)?;
    let p = pseudo_inverse_rows(&stacked)?;
    (0..p.cols()).map(|j| p.column(j).normalized()).collect()
}

fn check_shapes(channel: &ComplexMatrix, precoder: &ComplexVector, combiner: &ComplexVector) -> Result<()> {
    if channel.cols() != precoder.len() || channel.rows() != combiner.len() {
        return Err(invalid(format!(
            "shape mismatch: channel {}x{}, precoder {}, combiner {}",
            channel.rows(),
            channel.cols(),
            precoder.len(),
            combiner.len()
        )));
    }
    Ok(())
}

/// Post-combining SINR with unit noise power. The combiner is normalized
/// here, so any scaling of `target.combiner` gives the same answer.
pub fn compute_sinr(
    target: &LinkState,
    channel: &ComplexMatrix,
    intra_cell: &[Interferer<'_>],
    inter_cell: &[Interferer<'_>],
) -> Result<f64> {
    check_shapes(channel, &target.precoder, &target.combiner)?;
    let u = target.combiner.normalized()?;
    let gain = |ch: &ComplexMatrix, v: &ComplexVector| -> Result<f64> {
        check_shapes(ch, v, &u)?;
        Ok(u.dot(&ch.mul_vec(v)).norm_sqr())
    };
    let signal = target.tx_power * gain(channel, &target.precoder)?;
    let mut denom = 1.0;
    for i in intra_cell.iter().chain(inter_cell) {
        denom += i.power * gain(i.channel, i.precoder)?;
    }
    Ok(signal / denom)
}

/// Shannon rate per PRB with equal power split across `group_size` users.
pub fn prb_rate(sinr: f64, group_size: usize) -> f64 {
    debug_assert!(group_size >= 1);
    (sinr.max(0.0) / group_size as f64).ln_1p() / std::f64::consts::LN_2
}

/// Exponential effective SINR mapping.
pub fn eesm(sinrs: &[f64], beta: f64) -> Result<f64> {
    if sinrs.is_empty() {
        return Err(invalid("EESM needs at least one SINR"));
    }
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(invalid("EESM beta must be positive"));
    }
    let min = sinrs.iter().copied().fold(f64::INFINITY, f64::min);
    if min == f64::INFINITY {
        return Ok(f64::INFINITY);
    }
    // Shifting by the minimum keeps every exponent in (0, 1]; expm1/ln_1p keep
    // precision when beta dwarfs the SINR spread.
    let n = sinrs.len() as f64;
    let mean_m1 = sinrs.iter().map(|&s| (-(s - min) / beta).exp_m1()).sum::<f64>() / n;
    let out = min - beta * mean_m1.ln_1p();
    let max = sinrs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(out.clamp(min, max))
}

/// LMMSE-IRC combiner (Hv(Hv)ᴴ + W)⁻¹Hv; not normalized.
pub fn lmmse_irc_combiner(
    h: &ComplexMatrix,
    v: &ComplexVector,
    covariance: &ComplexMatrix,
) -> Result<ComplexVector> {
    if h.cols() != v.len() || covariance.rows() != h.rows() || !covariance.is_square() {
        return Err(invalid("shape mismatch in IRC combiner"));
    }
    if !covariance.is_hermitian(tol::HERMITIAN) {
        return Err(invalid("interference covariance must be Hermitian"));
    }
    let hv = h.mul_vec(v);
    let mut a = covariance.clone();
    a.add_outer(&hv, 1.0);
    a.solve(&hv)
}

/// IRC followed by de-orientation against the reference-aligned co-channel
/// signal H·v_ref, so that signal is nulled blindly.
pub fn nsbps_urllc_combiner(
    h: &ComplexMatrix,
    v_llc: &ComplexVector,
    v_ref: &ComplexVector,
    covariance: &ComplexMatrix,
) -> Result<ComplexVector> {
    let g = h.mul_vec(v_ref);
    if g.norm() == 0.0 {
        return Err(invalid("reference direction is invisible through this channel"));
    }
    let u1 = lmmse_irc_combiner(h, v_llc, covariance)?;
    deorient_against(&u1, &g)
}

/// Channel gain ‖H·v′‖² after projection.
pub fn post_projection_gain(h: &ComplexMatrix, v_projected: &ComplexVector) -> f64 {
    h.mul_vec(v_projected).norm_sqr()
}

/// Fraction of transmit energy lost by projecting `v_original` (unit norm).
pub fn projection_loss_fraction(v_original: &ComplexVector, v_projected: &ComplexVector) -> Result<f64> {
    if !v_original.is_unit() {
        return Err(invalid("original precoder must be unit-norm"));
    }
    Ok((1.0 - v_projected.norm_sqr() / v_original.norm_sqr()).clamp(0.0, 1.0))
}

/// Unit precoder obtained by projecting `v` onto `v_ref` and renormalizing.
pub fn projected_precoder(v: &ComplexVector, v_ref: &ComplexVector) -> Result<ComplexVector> {
    let p = project_onto(v, v_ref)?;
    if p.norm() <= tol::DEGENERATE * v.norm() {
        return Err(Error::DegenerateNullSpace);
    }
    p.normalized()
}

/// Dominant eigenvector of a Hermitian PSD matrix by power iteration.
fn dominant_eigenvector(cov: &ComplexMatrix) -> Result<ComplexVector> {
    let n = cov.rows();
    if cov.frobenius_norm() == 0.0 {
        return Err(invalid("all channels are zero"));
    }
    if n == 2 {
        let (a, d, b) = (cov[(0, 0)].re, cov[(1, 1)].re, cov[(0, 1)]);
        let half = 0.5 * (a - d);
        let top = 0.5 * (a + d) + half.hypot(b.norm());
        let x1 = ComplexVector::new(vec![b, C64::new(top - a, 0.0)])?;
        let x2 = ComplexVector::new(vec![C64::new(top - d, 0.0), b.conj()])?;
        let x = if x1.norm_sqr() >= x2.norm_sqr() { x1 } else { x2 };
        if x.norm() > 1e-12 * top {
            return x.normalized();
        }
        return ComplexVector::from_real(if d > a { &[0.0, 1.0] } else { &[1.0, 0.0] });
    }
    // Start from the strongest column so the iteration cannot begin orthogonal
    // to the dominant eigenvector of a nonzero matrix.
    let start = (0..n)
        .max_by(|&a, &b| cov[(a, a)].re.total_cmp(&cov[(b, b)].re))
        .expect("n >= 1");
    let mut v = cov.column(start).normalized()?;
    for _ in 0..200 {
        let next = cov.mul_vec(&v).normalized()?;
        let change = 1.0 - next.dot(&v).norm();
        v = next;
        if change < 1e-14 {
            break;
        }
    }
    Ok(v)
}

/// Fixes the global phase so the first nonzero entry is real positive.
fn canonical_phase(v: ComplexVector) -> ComplexVector {
    let pivot = v.iter().copied().find(|z| z.norm() > 1e-12).unwrap_or(C64::new(1.0, 0.0));
    v.scale(pivot.conj() / pivot.norm())
}

/// Dominant eigenvector of Σ HᴴH: the best single beam over a band.
pub fn wideband_precoder(channels: &[ComplexMatrix]) -> Result<ComplexVector> {
    let first = channels.first().ok_or_else(|| invalid("no channels"))?;
    let nt = first.cols();
    let mut cov = ComplexMatrix::zeros(nt, nt);
    for h in channels {
        if h.cols() != nt {
            return Err(invalid("channels differ in transmit dimension"));
        }
        cov.add_gram(h);
    }
    Ok(canonical_phase(dominant_eigenvector(&cov)?))
}

/// Single-layer precoder matched to the strongest receive direction of `h`
/// (its dominant right singular vector).
pub fn dominant_precoder(h: &ComplexMatrix) -> Result<ComplexVector> {
    if h.rows() >= h.cols() {
        return wideband_precoder(std::slice::from_ref(h));
    }
    // Work in the smaller receive space: v ∝ Hᴴu with u the top eigenvector of HHᴴ.
    let mut gram = ComplexMatrix::zeros(h.rows(), h.rows());
    gram.add_outer_gram(h, 1.0);
    let u = dominant_eigenvector(&gram)?;
    Ok(canonical_phase(h.hermitian_mul_vec(&u).normalized()?))
}

/// Worst-case SINR of an MMSE receiver: p·hᴴB⁻¹h, where B bounds the
/// interference-plus-noise covariance.
pub fn mmse_sinr(desired: &ComplexVector, bound: &ComplexMatrix, power: f64) -> Result<f64> {
    let x = bound.solve(desired)?;
    Ok(power * desired.dot(&x).re.max(0.0))
}

/// SINR of a fixed combiner `u` against the covariance bound B: p|uᴴh|²/(uᴴBu).
pub fn fixed_combiner_sinr(
    u: &ComplexVector,
    desired: &ComplexVector,
    bound: &ComplexMatrix,
    power: f64,
) -> f64 {
    let num = u.dot(desired).norm_sqr();
    let den = u.dot(&bound.mul_vec(u)).re;
    if den <= 0.0 {
        return 0.0;
    }
    power * num / den
}
