//! Gaussian line `X_B = √G·(X + δX)` with input-referred noise `⟨δX²⟩ = χ·N0`,
//! and the beamsplitter entangling cloner that gives Eve the most information
//! on Bob's data allowed by the uncertainty relations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{EmpiricalConditional, GaussianEnsemble, Quadrature, SampleBatch, ShotNoise};
use crate::rng::{self, tag};

/// Bob's homodyne outputs.
pub const QB: &str = "Q_B";
pub const PB: &str = "P_B";
/// Eve's beamsplitter outputs and the parts of her injected beam she knows
/// from the EPR partner she kept.
pub const QE: &str = "Q_E2";
pub const PE: &str = "P_E2";
pub const QK: &str = "Q_K";
pub const PK: &str = "P_K";

/// Absolute slack on the `ε ≥ 0` gate, for channels built from `χ0 + 0`.
const EPS_SLACK: f64 = 1e-12;

/// Vacuum noise `χ0 = (1−G)/G` a pure loss `G` adds at the input.
pub fn vacuum_noise(g: f64) -> f64 {
    (1.0 - g) / g
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelModel {
    pub g_q: f64,
    pub g_p: f64,
    pub chi_q: f64,
    pub chi_p: f64,
}

impl ChannelModel {
    pub fn new(g_q: f64, g_p: f64, chi_q: f64, chi_p: f64) -> Result<Self> {
        let ch = Self { g_q, g_p, chi_q, chi_p };
        ch.validate()?;
        Ok(ch)
    }

    pub fn symmetric(g: f64, chi: f64) -> Result<Self> {
        Self::new(g, g, chi, chi)
    }

    /// Symmetric channel with `χ = (1−G)/G + ε`.
    pub fn from_excess(g: f64, eps: f64) -> Result<Self> {
        if !(g > 0.0) {
            return Err(Error::param("g", format!("gain must be positive, got {g}")));
        }
        Self::symmetric(g, vacuum_noise(g) + eps)
    }

    pub fn identity() -> Self {
        Self {
            g_q: 1.0,
            g_p: 1.0,
            chi_q: 0.0,
            chi_p: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, g) in [("g_q", self.g_q), ("g_p", self.g_p)] {
            if !(g > 0.0) || !g.is_finite() {
                return Err(Error::param(name, format!("gain must be positive and finite, got {g}")));
            }
        }
        for (name, chi) in [("chi_q", self.chi_q), ("chi_p", self.chi_p)] {
            if !(chi >= 0.0) || !chi.is_finite() {
                return Err(Error::param(
                    name,
                    format!("added noise must be non-negative, got {chi}"),
                ));
            }
        }
        for (name, eps) in [("eps_q", self.eps_q()), ("eps_p", self.eps_p())] {
            if eps < -EPS_SLACK {
                return Err(Error::param(
                    name,
                    format!("excess noise {eps} is negative: less noise than the loss itself adds"),
                ));
            }
        }
        Ok(())
    }

    pub fn eps_q(&self) -> f64 {
        self.chi_q - vacuum_noise(self.g_q)
    }

    pub fn eps_p(&self) -> f64 {
        self.chi_p - vacuum_noise(self.g_p)
    }

    pub fn is_symmetric(&self) -> bool {
        self.g_q == self.g_p && self.chi_q == self.chi_p
    }

    pub fn gain(&self, q: Quadrature) -> f64 {
        match q {
            Quadrature::Q => self.g_q,
            Quadrature::P => self.g_p,
        }
    }

    pub fn chi(&self, q: Quadrature) -> f64 {
        match q {
            Quadrature::Q => self.chi_q,
            Quadrature::P => self.chi_p,
        }
    }

    /// `self` followed by `next`: gains multiply and `next`'s noise is
    /// referred back through `self`'s gain.
    pub fn followed_by(&self, next: &ChannelModel) -> ChannelModel {
        ChannelModel {
            g_q: self.g_q * next.g_q,
            g_p: self.g_p * next.g_p,
            chi_q: self.chi_q + next.chi_q / self.g_q,
            chi_p: self.chi_p + next.chi_p / self.g_p,
        }
    }

    /// Adds `Q_B`, `P_B` to an ensemble holding the transmitted quadratures
    /// `q`, `p`; the channel noises appear as two extra labels.
    pub fn propagate_ensemble(
        &self,
        e: &GaussianEnsemble,
        q: &str,
        p: &str,
        n0: ShotNoise,
    ) -> Result<GaussianEnsemble> {
        let noise =
            GaussianEnsemble::independent(["dQ_B", "dP_B"], &[self.chi_q * n0.value(), self.chi_p * n0.value()])?;
        let (gq, gp) = (self.g_q.sqrt(), self.g_p.sqrt());
        e.direct_sum(&noise)?
            .with_combination(QB, &[(q, gq), ("dQ_B", gq)])?
            .with_combination(PB, &[(p, gp), ("dP_B", gp)])
    }

    /// Bob's samples for a batch holding the transmitted `Q`, `P` columns.
    pub fn propagate(&self, transmitted: &SampleBatch, n0: ShotNoise, seed: u64) -> Result<SampleBatch> {
        self.validate()?;
        let q = transmitted.column("Q")?;
        let p = transmitted.column("P")?;
        let noise = GaussianEnsemble::independent(["dQ", "dP"], &[self.chi_q * n0.value(), self.chi_p * n0.value()])?
            .sample(transmitted.n(), rng::derive_seed(seed, tag::CHANNEL_NOISE))?;
        let (gq, gp) = (self.g_q.sqrt(), self.g_p.sqrt());
        let qb = q.iter().zip(noise.column("dQ")?).map(|(x, d)| gq * (x + d)).collect();
        let pb = p.iter().zip(noise.column("dP")?).map(|(x, d)| gp * (x + d)).collect();
        SampleBatch::from_columns([QB, PB], vec![qb, pb], seed)
    }
}

fn check_squeezing(v: f64, s: f64) -> Result<()> {
    let tol = 1e-12 * v;
    if !(v >= 1.0) {
        return Err(Error::param("v", format!("modulation variance must be >= 1, got {v}")));
    }
    if !(s >= 1.0 / v - tol && s <= v + tol) {
        return Err(Error::param(
            "s",
            format!("squeezing must lie in [1/V, V], got {s} with V = {v}"),
        ));
    }
    Ok(())
}

/// `(V_{Q_B|Q_A}, V_{P_B|P_A}) = (G_Q(χ_Q+s), G_P(χ_P+1/s))·N0`.
pub fn alice_conditional_variance(ch: &ChannelModel, v: f64, s: f64, n0: ShotNoise) -> Result<(f64, f64)> {
    check_squeezing(v, s)?;
    let n0 = n0.value();
    Ok((ch.g_q * (ch.chi_q + s) * n0, ch.g_p * (ch.chi_p + 1.0 / s) * n0))
}

/// Eve's smallest possible `(V_{Q_B|Q_E}, V_{P_B|P_E})`. The Q bound is set
/// by the P channel and vice versa; a zero denominator gives `+∞`.
pub fn eve_conditional_variance_bound(ch: &ChannelModel, v: f64, n0: ShotNoise) -> Result<(f64, f64)> {
    if !(v >= 1.0) {
        return Err(Error::param("v", format!("modulation variance must be >= 1, got {v}")));
    }
    let n0 = n0.value();
    let inv = |d: f64| if d == 0.0 { f64::INFINITY } else { n0 / d };
    Ok((inv(ch.g_p * (ch.chi_p + 1.0 / v)), inv(ch.g_q * (ch.chi_q + 1.0 / v))))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackBound {
    pub v_b_given_a_q: f64,
    pub v_b_given_a_p: f64,
    pub v_b_given_e_q_min: f64,
    pub v_b_given_e_p_min: f64,
}

impl AttackBound {
    pub fn new(ch: &ChannelModel, v: f64, s: f64, n0: ShotNoise) -> Result<Self> {
        let (a_q, a_p) = alice_conditional_variance(ch, v, s, n0)?;
        let (e_q, e_p) = eve_conditional_variance_bound(ch, v, n0)?;
        Ok(Self {
            v_b_given_a_q: a_q,
            v_b_given_a_p: a_p,
            v_b_given_e_q_min: e_q,
            v_b_given_e_p_min: e_p,
        })
    }
}

/// Eve replaces the line by a beamsplitter of transmission `G` and injects one
/// half of an EPR pair of variance `W = Gχ/(1−G)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntanglingCloner {
    pub g: f64,
    pub eps: f64,
    pub n0: ShotNoise,
}

/// Bob's and Eve's samples from a simulated cloner attack.
#[derive(Debug, Clone, PartialEq)]
pub struct ClonerOutput {
    /// Columns `Q_B`, `P_B`.
    pub bob: SampleBatch,
    /// Columns `Q_E2`, `P_E2`, `Q_K`, `P_K`.
    pub eve: SampleBatch,
    /// Variance of each known part; zero when Eve injects plain vacuum.
    pub known_variance: f64,
}

impl EntanglingCloner {
    pub fn new(ch: &ChannelModel, n0: ShotNoise) -> Result<Self> {
        ch.validate()?;
        if !ch.is_symmetric() {
            return Err(Error::Unsupported(
                "the entangling cloner needs G_Q = G_P and χ_Q = χ_P".into(),
            ));
        }
        if !(ch.g_q < 1.0) {
            return Err(Error::Unsupported(format!(
                "the entangling cloner is only constructed for G < 1, got {}",
                ch.g_q
            )));
        }
        Ok(Self {
            g: ch.g_q,
            eps: ch.eps_q().max(0.0),
            n0,
        })
    }

    pub fn channel(&self) -> ChannelModel {
        ChannelModel::from_excess(self.g, self.eps).expect("validated at construction")
    }

    /// `W = Gχ/(1−G) = 1 + Gε/(1−G)`, in units of `N0`.
    pub fn source_variance(&self) -> f64 {
        1.0 + self.g * self.eps / (1.0 - self.g)
    }

    fn known_gain(&self) -> f64 {
        let w = self.source_variance();
        (w * w - 1.0).sqrt() / w
    }

    /// `N0/(Gχ + G/V)`: the bound of [`eve_conditional_variance_bound`], which
    /// this attack reaches.
    pub fn predicted_conditional_variance(&self, v: f64) -> f64 {
        let chi = vacuum_noise(self.g) + self.eps;
        self.n0.value() / (self.g * chi + self.g / v)
    }

    /// Analytic ensemble of the attack: `e` must hold the transmitted `q`, `p`.
    /// Adds Bob's outputs, Eve's outputs and her known parts.
    pub fn attack_ensemble(&self, e: &GaussianEnsemble, q: &str, p: &str) -> Result<GaussianEnsemble> {
        let w = self.source_variance();
        let source = GaussianEnsemble::epr_labeled(w, self.n0, ["Q_F", "P_F", "Q_E1", "P_E1"])?;
        let (t, r) = (self.g.sqrt(), (1.0 - self.g).sqrt());
        let k = self.known_gain();
        e.direct_sum(&source)?
            .with_combination(QB, &[(q, t), ("Q_E1", r)])?
            .with_combination(PB, &[(p, t), ("P_E1", r)])?
            .with_combination(QE, &[("Q_E1", t), (q, -r)])?
            .with_combination(PE, &[("P_E1", t), (p, -r)])?
            .with_combination(QK, &[("Q_F", k)])?
            .with_combination(PK, &[("P_F", -k)])
    }

    /// Runs the attack on a batch holding the transmitted `Q`, `P` columns.
    pub fn attack(&self, transmitted: &SampleBatch, seed: u64) -> Result<ClonerOutput> {
        let q = transmitted.column("Q")?;
        let p = transmitted.column("P")?;
        let w = self.source_variance();
        let source = GaussianEnsemble::epr_labeled(w, self.n0, ["Q_F", "P_F", "Q_E1", "P_E1"])?
            .sample(transmitted.n(), rng::derive_seed(seed, tag::EVE_SOURCE))?;
        let (t, r) = (self.g.sqrt(), (1.0 - self.g).sqrt());
        let k = self.known_gain();
        let mix = |x: &[f64], e1: &[f64]| -> (Vec<f64>, Vec<f64>) {
            x.iter().zip(e1).map(|(x, e)| (t * x + r * e, t * e - r * x)).unzip()
        };
        let (qb, qe) = mix(q, source.column("Q_E1")?);
        let (pb, pe) = mix(p, source.column("P_E1")?);
        let qk = source.column("Q_F")?.iter().map(|f| k * f).collect();
        let pk = source.column("P_F")?.iter().map(|f| -k * f).collect();
        Ok(ClonerOutput {
            bob: SampleBatch::from_columns([QB, PB], vec![qb, pb], seed)?,
            eve: SampleBatch::from_columns([QE, PE, QK, PK], vec![qe, pe, qk, pk], seed)?,
            known_variance: (w - 1.0 / w).max(0.0) * self.n0.value(),
        })
    }
}

impl ClonerOutput {
    /// Eve's record on one quadrature: her beamsplitter output plus the known
    /// part, the latter dropped when it is identically zero.
    pub fn eve_record(&self, q: Quadrature) -> Vec<&'static str> {
        let (e, k) = match q {
            Quadrature::Q => (QE, QK),
            Quadrature::P => (PE, PK),
        };
        if self.known_variance > 0.0 {
            vec![e, k]
        } else {
            vec![e]
        }
    }

    /// Least-squares `V_{X_B|X_E}` from the simulated records.
    pub fn eve_conditional_variance(&self, q: Quadrature) -> Result<EmpiricalConditional> {
        let target = match q {
            Quadrature::Q => QB,
            Quadrature::P => PB,
        };
        let joint = self.bob.join(&self.eve)?;
        joint.conditional_variance(target, &self.eve_record(q))
    }
}
