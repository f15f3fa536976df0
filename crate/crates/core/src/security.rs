//! Closed-form secret-key rates and noise thresholds for individual Gaussian
//! attacks, in bits per symbol.
//!
//! Every function takes dimensionless channel parameters: gain `g`, added
//! noise `chi` and excess noise `eps` in units of `N0`, modulation variance
//! `v ≥ 1` and squeezing `s ∈ [1/v, v]`.

use std::f64::consts::LN_2;

use serde::{Deserialize, Serialize};

use crate::channel::{vacuum_noise, ChannelModel};
use crate::error::{Error, Result};
use crate::preparation::{PreparationConfig, PreparationMode};

/// Modulation variance standing in for `V → ∞` in the threshold curves; the
/// truncation moves every threshold by less than `1e-5`.
pub const V_LARGE: f64 = 1e6;

/// Above this gain the strong-loss approximations are flagged.
pub const STRONG_LOSS_MAX_GAIN: f64 = 0.05;

fn check(g: f64, chi: f64, v: f64) -> Result<()> {
    if !(g > 0.0) || !g.is_finite() {
        return Err(Error::param("g", format!("gain must be positive, got {g}")));
    }
    if !(chi >= 0.0) || !chi.is_finite() {
        return Err(Error::param(
            "chi",
            format!("added noise must be non-negative, got {chi}"),
        ));
    }
    if !(v >= 1.0) {
        return Err(Error::param("v", format!("modulation variance must be >= 1, got {v}")));
    }
    Ok(())
}

fn check_s(v: f64, s: f64) -> Result<()> {
    let tol = 1e-12 * v;
    if !(s >= 1.0 / v - tol && s <= v + tol) {
        return Err(Error::param(
            "s",
            format!("squeezing must lie in [1/V, V], got {s} with V = {v}"),
        ));
    }
    Ok(())
}

/// `I_BA = ½·log2((V+χ)/(s+χ))`.
pub fn mutual_info_ba(g: f64, chi: f64, v: f64, s: f64) -> Result<f64> {
    check(g, chi, v)?;
    check_s(v, s)?;
    Ok(0.5 * ((v + chi) / (s + chi)).log2())
}

/// `I_BE = ½·log2[(GV+Gχ)(Gχ+G/V)]` for an Eve at the Heisenberg bound.
pub fn mutual_info_be_rr(g: f64, chi: f64, v: f64) -> Result<f64> {
    check(g, chi, v)?;
    Ok(0.5 * ((g * v + g * chi) * (g * chi + g / v)).log2())
}

/// Reverse-reconciliation secret rate `½·log2[1/((Gχ+G/V)(Gχ+Gs))]`.
pub fn delta_i_rr(g: f64, chi: f64, v: f64, s: f64) -> Result<f64> {
    check(g, chi, v)?;
    check_s(v, s)?;
    Ok(-0.5 * ((g * chi + g / v) * (g * chi + g * s)).log2())
}

/// `(Gχ+Gs)(Gχ+G/V) < 1`: the reverse-reconciliation security condition.
pub fn rr_condition(g: f64, chi: f64, v: f64, s: f64) -> bool {
    (g * chi + g * s) * (g * chi + g / v) < 1.0
}

/// Asymmetric channel: secure if either pairing of the two quadratures
/// satisfies the condition.
pub fn rr_condition_asymmetric(ch: &ChannelModel, v: f64, s: f64) -> bool {
    let (gq, gp, cq, cp) = (ch.g_q, ch.g_p, ch.chi_q, ch.chi_p);
    (gq * cq + gq * s) * (gp * cp + gp / v) < 1.0 || (gp * cp + gp * s) * (gq * cq + gq / v) < 1.0
}

/// Squeezed states in a random basis with basis sifting: `½·log2[1/(Gχ+G/V)]`.
pub fn delta_i_epr(g: f64, chi: f64, v: f64) -> Result<f64> {
    check(g, chi, v)?;
    Ok(-0.5 * (g * chi + g / v).log2())
}

/// Coherent states (`s = 1`, no sifting): `½·log2[1/((Gχ+G/V)(Gχ+G))]`.
pub fn delta_i_coh(g: f64, chi: f64, v: f64) -> Result<f64> {
    check(g, chi, v)?;
    Ok(-0.5 * ((g * chi + g / v) * (g * chi + g)).log2())
}

/// `x − 1/G + √(1/G² + a²)` with the cancellation removed.
fn shifted_root(g: f64, a: f64) -> f64 {
    let inv = 1.0 / g;
    a * a / (inv + (inv * inv + a * a).sqrt())
}

/// Largest excess noise with a positive reverse-reconciliation rate:
/// `1 − 1/G − s/2 − 1/(2V) + √(1/G² + ¼(s−1/V)²)`.
pub fn epsilon_max_rr(g: f64, v: f64, s: f64) -> Result<f64> {
    check(g, 0.0, v)?;
    check_s(v, s)?;
    let half_gap = 0.5 * (s - 1.0 / v);
    Ok(1.0 - 1.0 / v - half_gap + shifted_root(g, half_gap))
}

/// `½ − 1/(2V) − 1/G + √(1/G² + ¼(1−1/V)²)`.
pub fn epsilon_max_coh(g: f64, v: f64) -> Result<f64> {
    check(g, 0.0, v)?;
    let a = 0.5 * (1.0 - 1.0 / v);
    Ok(a + shifted_root(g, a))
}

/// Threshold for squeezed states measured in the squeezed quadrature,
/// `1 − 1/V`, independent of the loss.
pub fn epsilon_max_epr(v: f64) -> Result<f64> {
    check(1.0, 0.0, v)?;
    Ok(1.0 - 1.0 / v)
}

/// Direct reconciliation needs `χ < 1`, i.e. `ε < 2 − 1/G`.
pub fn dr_threshold(g: f64) -> Result<f64> {
    check(g, 0.0, 1.0)?;
    Ok(2.0 - 1.0 / g)
}

pub fn dr_secure(g: f64, eps: f64) -> Result<bool> {
    Ok(eps < dr_threshold(g)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeparabilityVerdict {
    pub entangled: bool,
    /// `C² − (V−1)(V_B−1)`; positive iff the Alice-Bob state is entangled.
    pub margin: f64,
}

/// Duan-Simon test on the virtual EPR state shared by Alice and Bob:
/// entangled iff `(V−1)(V_B−1) < C²` with `V_B = G(V+χ)`, `C² = G(V²−1)`.
pub fn duan_simon(g: f64, chi: f64, v: f64) -> Result<SeparabilityVerdict> {
    check(g, chi, v)?;
    let vb = g * (v + chi);
    let c2 = g * (v * v - 1.0);
    let margin = c2 - (v - 1.0) * (vb - 1.0);
    Ok(SeparabilityVerdict {
        entangled: margin > 0.0,
        margin,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrongLossRates {
    /// `(G/2ln2)(1−1/V−ε)`.
    pub delta_i_epr: f64,
    /// `(G/2ln2)(1−1/V−2ε)`.
    pub delta_i_coh: f64,
    /// `g` is above [`STRONG_LOSS_MAX_GAIN`] and the expansion is unreliable.
    pub outside_validity: bool,
}

pub fn strong_loss_rates(g: f64, v: f64, eps: f64) -> Result<StrongLossRates> {
    check(g, 0.0, v)?;
    let k = g / (2.0 * LN_2);
    Ok(StrongLossRates {
        delta_i_epr: k * (1.0 - 1.0 / v - eps),
        delta_i_coh: k * (1.0 - 1.0 / v - 2.0 * eps),
        outside_validity: g > STRONG_LOSS_MAX_GAIN,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bb84Comparison {
    pub nbar: f64,
    pub g: f64,
    /// Bits per time slot, `G·n̄/2`.
    pub rate: f64,
}

/// Best-case BB84 rate on the same line with `n̄ ≤ 1` photons per slot.
pub fn bb84_compare(g: f64, nbar: f64) -> Result<Bb84Comparison> {
    if !(g > 0.0 && g <= 1.0) {
        return Err(Error::param(
            "g",
            format!("line transmission must lie in (0, 1], got {g}"),
        ));
    }
    if !(nbar > 0.0 && nbar <= 1.0) {
        return Err(Error::param(
            "nbar",
            format!("mean photon number must lie in (0, 1], got {nbar}"),
        ));
    }
    Ok(Bb84Comparison {
        nbar,
        g,
        rate: 0.5 * g * nbar,
    })
}

/// `β·I_BA − I_BE`: the rate left when reconciliation extracts only a
/// fraction `β` of the mutual information.
pub fn practical_rate(g: f64, chi: f64, v: f64, s: f64, beta: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::param(
            "beta",
            format!("efficiency must lie in [0, 1], got {beta}"),
        ));
    }
    Ok(beta * mutual_info_ba(g, chi, v, s)? - mutual_info_be_rr(g, chi, v)?)
}

/// Efficiency `β* = I_BE/I_BA` at which the practical rate vanishes; `None`
/// when Bob learns nothing about Alice.
pub fn beta_star(g: f64, chi: f64, v: f64, s: f64) -> Result<Option<f64>> {
    let iba = mutual_info_ba(g, chi, v, s)?;
    let ibe = mutual_info_be_rr(g, chi, v)?;
    Ok((iba > 0.0).then(|| ibe / iba))
}

/// `dB = −10·log10(G)`.
pub fn gain_to_loss_db(g: f64) -> f64 {
    -10.0 * g.log10()
}

pub fn loss_db_to_gain(db: f64) -> f64 {
    10f64.powf(-db / 10.0)
}

/// One row of the tolerable-excess-noise curves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub loss_db: f64,
    pub g: f64,
    pub eps_max_dr: f64,
    pub eps_max_rr_coh: f64,
    pub eps_max_rr_epr: f64,
    pub eps_entanglement: f64,
}

pub fn curve_point(loss_db: f64, v: f64) -> Result<CurvePoint> {
    if !(0.0..=40.0).contains(&loss_db) {
        return Err(Error::param(
            "loss_db",
            format!("must lie in [0, 40] dB, got {loss_db}"),
        ));
    }
    let g = loss_db_to_gain(loss_db);
    Ok(CurvePoint {
        loss_db,
        g,
        eps_max_dr: dr_threshold(g)?,
        eps_max_rr_coh: epsilon_max_coh(g, v)?,
        eps_max_rr_epr: epsilon_max_rr(g, v, 1.0 / v)?,
        eps_entanglement: 2.0,
    })
}

/// Gain at which the direct-reconciliation threshold meets the coherent-state
/// reverse-reconciliation one; DR tolerates more noise above it.
pub fn dr_coherent_crossover_gain(v: f64) -> Result<f64> {
    let diff = |g: f64| -> Result<f64> { Ok(dr_threshold(g)? - epsilon_max_coh(g, v)?) };
    let (mut lo, mut hi) = (0.5, 1.0);
    if diff(lo)? >= 0.0 || diff(hi)? <= 0.0 {
        return Err(Error::Unsupported(format!("no crossover in (0.5, 1] at V = {v}")));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if diff(mid)? < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Every closed-form figure for one operating point. Rates are per sent
/// symbol with basis sifting applied.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SecurityReport {
    pub g: f64,
    pub loss_db: f64,
    pub chi: f64,
    pub eps: f64,
    pub v: f64,
    pub s: f64,
    pub basis_sifting_factor: f64,
    pub i_ba: f64,
    pub i_be: f64,
    pub delta_i_rr: f64,
    pub rr_secure: bool,
    pub eps_max_rr: f64,
    pub eps_max_dr: f64,
    pub dr_secure: bool,
    pub entangled: bool,
    pub separability_margin: f64,
}

impl SecurityReport {
    pub fn new(g: f64, chi: f64, v: f64, s: f64, sifting: f64) -> Result<Self> {
        let i_ba = sifting * mutual_info_ba(g, chi, v, s)?;
        let i_be = sifting * mutual_info_be_rr(g, chi, v)?;
        let eps = chi - vacuum_noise(g);
        let sep = duan_simon(g, chi, v)?;
        Ok(Self {
            g,
            loss_db: gain_to_loss_db(g),
            chi,
            eps,
            v,
            s,
            basis_sifting_factor: sifting,
            i_ba,
            i_be,
            delta_i_rr: sifting * delta_i_rr(g, chi, v, s)?,
            rr_secure: rr_condition(g, chi, v, s),
            eps_max_rr: epsilon_max_rr(g, v, s)?,
            eps_max_dr: dr_threshold(g)?,
            dr_secure: chi < 1.0,
            entangled: sep.entangled,
            separability_margin: sep.margin,
        })
    }

    /// Report for a preparation sent through a symmetric channel. Random
    /// single-quadrature preparation is evaluated in the squeezed basis.
    pub fn for_config(ch: &ChannelModel, prep: &PreparationConfig) -> Result<Self> {
        ch.validate()?;
        prep.validate()?;
        if !ch.is_symmetric() {
            return Err(Error::Unsupported(
                "full reports need a symmetric channel; use rr_condition_asymmetric".into(),
            ));
        }
        let s = match prep.mode {
            PreparationMode::Joint { .. } => prep.squeezing().expect("joint mode"),
            PreparationMode::SingleQuadrature { .. } => 1.0 / prep.v,
        };
        Self::new(ch.g_q, ch.chi_q, prep.v, s, prep.sifting_factor())
    }
}
