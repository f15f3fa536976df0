//! Alice's two equivalent preparation boxes.
//!
//! The EPR route measures one half of an EPR pair and infers the state of the
//! other half; the direct route draws displacements from a random number
//! generator and sends squeezed or coherent states around them. Both routes
//! produce the same joint distribution of Alice's estimators and the
//! transmitted quadratures.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{labels, GaussianEnsemble, Quadrature, SampleBatch, ShotNoise};
use crate::rng::{self, tag};

/// Column labels of Alice's estimators.
pub const QA: &str = "Q_A";
pub const PA: &str = "P_A";

/// Which quadrature a single-quadrature measurement picks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisChoice {
    Fixed(Quadrature),
    /// Fair coin per symbol.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PreparationMode {
    /// Homodyne measurement of Q' or P' (squeezed states, `s = 1/V` or `V`).
    SingleQuadrature { basis: BasisChoice },
    /// Simultaneous measurement of Q' and P' with noise variances `μ·N0` and
    /// `N0/μ`.
    Joint { mu: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreparationConfig {
    pub v: f64,
    pub mode: PreparationMode,
    pub n0: ShotNoise,
}

impl PreparationConfig {
    /// Coherent states: joint measurement with `μ = 1`, `s = 1`.
    pub fn coherent(v: f64) -> Self {
        Self::joint(v, 1.0)
    }

    pub fn joint(v: f64, mu: f64) -> Self {
        Self {
            v,
            mode: PreparationMode::Joint { mu },
            n0: ShotNoise::default(),
        }
    }

    /// Joint measurement tuned to produce states of squeezing `s`.
    pub fn squeezed(v: f64, s: f64) -> Result<Self> {
        Ok(Self::joint(v, mu_for_squeezing(v, s)?))
    }

    /// Single-quadrature measurement with a random basis per symbol.
    pub fn epr(v: f64) -> Self {
        Self {
            v,
            mode: PreparationMode::SingleQuadrature {
                basis: BasisChoice::Random,
            },
            n0: ShotNoise::default(),
        }
    }

    pub fn with_n0(mut self, n0: ShotNoise) -> Self {
        self.n0 = n0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.v >= 1.0) || !self.v.is_finite() {
            return Err(Error::param(
                "v",
                format!("modulation variance must be >= 1, got {}", self.v),
            ));
        }
        if let PreparationMode::Joint { mu } = self.mode {
            if !(mu > 0.0) || !mu.is_finite() {
                return Err(Error::param(
                    "mu",
                    format!("joint measurement needs 0 < mu < inf, got {mu}"),
                ));
            }
        }
        Ok(())
    }

    /// Squeezing `s` of the transmitted states in Q, when it does not vary
    /// from symbol to symbol.
    pub fn squeezing(&self) -> Option<f64> {
        match self.mode {
            PreparationMode::Joint { mu } => Some(squeezing_of(self.v, mu).ok()?),
            PreparationMode::SingleQuadrature {
                basis: BasisChoice::Fixed(q),
            } => Some(single_squeezing(self.v, q)),
            PreparationMode::SingleQuadrature { .. } => None,
        }
    }

    /// Fraction of symbols kept after basis sifting against a random Bob.
    pub fn sifting_factor(&self) -> f64 {
        match self.mode {
            PreparationMode::Joint { .. } => 1.0,
            PreparationMode::SingleQuadrature { .. } => 0.5,
        }
    }
}

/// Transmission `T = 1/(1+μ)` of the beamsplitter realizing the joint measurement.
pub fn mu_to_transmission(mu: f64) -> Result<f64> {
    if !(mu >= 0.0) {
        return Err(Error::param("mu", format!("must be non-negative, got {mu}")));
    }
    Ok(1.0 / (1.0 + mu))
}

/// Squeezing factor `s = (μV+1)/(V+μ)` of the states Alice effectively sends.
pub fn squeezing_of(v: f64, mu: f64) -> Result<f64> {
    if !(v >= 1.0) {
        return Err(Error::param("v", format!("modulation variance must be >= 1, got {v}")));
    }
    if !(mu >= 0.0) {
        return Err(Error::param("mu", format!("must be non-negative, got {mu}")));
    }
    if mu.is_infinite() {
        return Ok(v);
    }
    Ok((mu * v + 1.0) / (v + mu))
}

/// Inverse of [`squeezing_of`]: `μ = (sV−1)/(V−s)`, for `1/V ≤ s < V`.
pub fn mu_for_squeezing(v: f64, s: f64) -> Result<f64> {
    if !(v > 1.0) {
        return Err(Error::param("v", "squeezing does not determine mu at v = 1"));
    }
    if !(s >= 1.0 / v && s < v) {
        return Err(Error::param("s", format!("must lie in [1/V, V), got {s} with V = {v}")));
    }
    Ok(((s * v - 1.0) / (v - s)).max(0.0))
}

fn single_squeezing(v: f64, q: Quadrature) -> f64 {
    match q {
        Quadrature::Q => 1.0 / v,
        Quadrature::P => v,
    }
}

/// Least-squares estimate of the sent quadrature from a homodyne value of its
/// EPR partner: `α·x` with `α = ⟨X X'⟩/⟨X'²⟩`.
pub fn alice_estimator_single(e: &GaussianEnsemble, quadrature: Quadrature, measured: f64) -> Result<f64> {
    let (sent, kept) = match quadrature {
        Quadrature::Q => (labels::Q, labels::Q_KEPT),
        Quadrature::P => (labels::P, labels::P_KEPT),
    };
    let var = e.variance(kept)?;
    if var == 0.0 {
        return Err(Error::param("e", format!("`{kept}` has zero variance")));
    }
    Ok(e.covariance(sent, kept)? / var * measured)
}

/// Analytic covariance of `(Q', P', Q, P, Q_A, P_A)` for the joint measurement,
/// with the measurement noises as two extra labels.
pub fn joint_measurement_ensemble(v: f64, mu: f64, n0: ShotNoise) -> Result<GaussianEnsemble> {
    PreparationConfig::joint(v, mu).validate()?;
    let c = (v * v - 1.0).sqrt();
    let noise = GaussianEnsemble::independent(["n_Q", "n_P"], &[mu * n0.value(), n0.value() / mu])?;
    GaussianEnsemble::epr(v, n0)?
        .direct_sum(&noise)?
        .with_combination(QA, &[(labels::Q_KEPT, c / (v + mu)), ("n_Q", c / (v + mu))])?
        .with_combination(
            PA,
            &[(labels::P_KEPT, -c / (v + 1.0 / mu)), ("n_P", -c / (v + 1.0 / mu))],
        )
}

/// Alice's estimators and the transmitted quadratures, stored by column.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    /// Columns `Q_A`, `P_A` (an unmeasured estimator is stored as 0).
    pub alice: SampleBatch,
    /// Columns `Q`, `P`.
    pub transmitted: SampleBatch,
    /// Measured quadrature per symbol in single-quadrature mode.
    pub basis: Option<Vec<Quadrature>>,
    pub config: PreparationConfig,
}

/// One symbol of a [`Prepared`] batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreparedState {
    pub qa: Option<f64>,
    pub pa: Option<f64>,
    /// `V_{Q|Q_A}` and `V_{P|P_A}`.
    pub conditional_q: f64,
    pub conditional_p: f64,
    pub squeezing: f64,
}

impl Prepared {
    pub fn n(&self) -> usize {
        self.alice.n()
    }

    pub fn squeezing_at(&self, i: usize) -> f64 {
        match &self.basis {
            Some(b) => single_squeezing(self.config.v, b[i]),
            None => self.config.squeezing().unwrap_or(1.0),
        }
    }

    pub fn state(&self, i: usize) -> PreparedState {
        let n0 = self.config.n0.value();
        let s = self.squeezing_at(i);
        let qa = self.alice.column(QA).expect("Q_A column")[i];
        let pa = self.alice.column(PA).expect("P_A column")[i];
        let measured = self.basis.as_ref().map(|b| b[i]);
        PreparedState {
            qa: (measured != Some(Quadrature::P)).then_some(qa),
            pa: (measured != Some(Quadrature::Q)).then_some(pa),
            conditional_q: s * n0,
            conditional_p: n0 / s,
            squeezing: s,
        }
    }

    /// Alice's estimators and the transmitted quadratures in one batch.
    pub fn joint_batch(&self) -> Result<SampleBatch> {
        self.alice.join(&self.transmitted)
    }
}

fn draw_bases(cfg: &PreparationConfig, n: usize, seed: u64) -> Option<Vec<Quadrature>> {
    match cfg.mode {
        PreparationMode::Joint { .. } => None,
        PreparationMode::SingleQuadrature {
            basis: BasisChoice::Fixed(q),
        } => Some(vec![q; n]),
        PreparationMode::SingleQuadrature {
            basis: BasisChoice::Random,
        } => {
            let mut coin = rng::substream(rng::derive_seed(seed, tag::ALICE_BASIS), 0);
            Some(
                (0..n)
                    .map(|_| {
                        if coin.random::<bool>() {
                            Quadrature::Q
                        } else {
                            Quadrature::P
                        }
                    })
                    .collect(),
            )
        }
    }
}

/// EPR route: sample the pair and Alice's measurement noises, then form the
/// estimators from her measurement record.
pub fn prepare_via_epr(cfg: &PreparationConfig, n: usize, seed: u64) -> Result<Prepared> {
    cfg.validate()?;
    let prep_seed = rng::derive_seed(seed, tag::PREPARATION);
    let bases = draw_bases(cfg, n, seed);
    let (qa, pa, q, p) = match cfg.mode {
        PreparationMode::Joint { mu } => {
            let batch = joint_measurement_ensemble(cfg.v, mu, cfg.n0)?.sample(n, prep_seed)?;
            let col = |l: &str| batch.column(l).map(<[f64]>::to_vec);
            (col(QA)?, col(PA)?, col(labels::Q)?, col(labels::P)?)
        }
        PreparationMode::SingleQuadrature { .. } => {
            let e = GaussianEnsemble::epr(cfg.v, cfg.n0)?;
            let batch = e.sample(n, prep_seed)?;
            let bases = bases.as_deref().expect("single mode draws bases");
            let (alpha_q, alpha_p) = (
                alice_estimator_single(&e, Quadrature::Q, 1.0)?,
                alice_estimator_single(&e, Quadrature::P, 1.0)?,
            );
            let qk = batch.column(labels::Q_KEPT)?;
            let pk = batch.column(labels::P_KEPT)?;
            let qa = bases
                .iter()
                .zip(qk)
                .map(|(b, x)| if *b == Quadrature::Q { alpha_q * x } else { 0.0 })
                .collect();
            let pa = bases
                .iter()
                .zip(pk)
                .map(|(b, x)| if *b == Quadrature::P { alpha_p * x } else { 0.0 })
                .collect();
            (
                qa,
                pa,
                batch.column(labels::Q)?.to_vec(),
                batch.column(labels::P)?.to_vec(),
            )
        }
    };
    Ok(Prepared {
        alice: SampleBatch::from_columns([QA, PA], vec![qa, pa], seed)?,
        transmitted: SampleBatch::from_columns([labels::Q, labels::P], vec![q, p], seed)?,
        basis: bases,
        config: *cfg,
    })
}

/// Direct route: draw `Q_A ~ N(0, (V−s)·N0)`, `P_A ~ N(0, (V−1/s)·N0)` and add
/// the squeezed-state fluctuations `s·N0`, `N0/s`.
pub fn prepare_direct(cfg: &PreparationConfig, n: usize, seed: u64) -> Result<Prepared> {
    cfg.validate()?;
    let bases = draw_bases(cfg, n, seed);
    let unit = GaussianEnsemble::independent(["z1", "z2", "z3", "z4"], &[1.0; 4])?
        .sample(n, rng::derive_seed(seed, tag::PREPARATION))?;
    let (v, n0) = (cfg.v, cfg.n0.value());
    let fixed_s = cfg.squeezing();
    let squeezing = |i: usize| match (&bases, fixed_s) {
        (Some(b), _) => single_squeezing(v, b[i]),
        (None, Some(s)) => s,
        (None, None) => unreachable!("joint mode has a fixed squeezing"),
    };
    let z: Vec<&[f64]> = ["z1", "z2", "z3", "z4"]
        .iter()
        .map(|l| unit.column(l))
        .collect::<Result<_>>()?;
    let mut cols = [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    for i in 0..n {
        let s = squeezing(i);
        let qa = ((v - s).max(0.0) * n0).sqrt() * z[0][i];
        let pa = ((v - 1.0 / s).max(0.0) * n0).sqrt() * z[1][i];
        cols[0][i] = qa;
        cols[1][i] = pa;
        cols[2][i] = qa + (s * n0).sqrt() * z[2][i];
        cols[3][i] = pa + (n0 / s).sqrt() * z[3][i];
    }
    let [qa, pa, q, p] = cols;
    Ok(Prepared {
        alice: SampleBatch::from_columns([QA, PA], vec![qa, pa], seed)?,
        transmitted: SampleBatch::from_columns([labels::Q, labels::P], vec![q, p], seed)?,
        basis: bases,
        config: *cfg,
    })
}

/// Analytic covariance of `(Q_A, P_A, Q, P)` shared by both routes in joint
/// mode.
pub fn analytic_joint_covariance(v: f64, s: f64, n0: ShotNoise) -> Result<GaussianEnsemble> {
    let (a, b) = (v - s, v - 1.0 / s);
    let e = GaussianEnsemble::independent(["a", "b", "dq", "dp"], &[a, b, s, 1.0 / s])?
        .with_combination("Q", &[("a", 1.0), ("dq", 1.0)])?
        .with_combination("P", &[("b", 1.0), ("dp", 1.0)])?
        .relabel("a", QA)?
        .relabel("b", PA)?
        .marginal(&[QA, PA, labels::Q, labels::P])?;
    e.rescaled(n0.value())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn transmission_examples() {
        assert_eq!(mu_to_transmission(1.0).unwrap(), 0.5);
        assert_eq!(mu_to_transmission(0.0).unwrap(), 1.0);
        assert_eq!(mu_to_transmission(3.0).unwrap(), 0.25);
        assert!(mu_to_transmission(-1.0).is_err());
    }

    #[test]
    fn squeezing_examples() {
        for v in [1.0, 2.5, 10.0, 1e4] {
            assert_relative_eq!(squeezing_of(v, 1.0).unwrap(), 1.0, epsilon = 1e-15);
        }
        assert_relative_eq!(squeezing_of(10.0, 0.0).unwrap(), 0.1, epsilon = 1e-15);
        assert!((squeezing_of(10.0, 1e9).unwrap() - 10.0).abs() < 1e-6);
        assert_eq!(squeezing_of(10.0, f64::INFINITY).unwrap(), 10.0);
    }

    #[test]
    fn squeezing_inverse_round_trips() {
        for (v, mu) in [(10.0, 0.5), (4.0, 3.0), (1.5, 0.25)] {
            let s = squeezing_of(v, mu).unwrap();
            assert_relative_eq!(mu_for_squeezing(v, s).unwrap(), mu, epsilon = 1e-12);
        }
        assert!(mu_for_squeezing(10.0, 10.0).is_err());
    }

    #[test]
    fn single_estimator_examples() {
        let e = GaussianEnsemble::epr(1.0, ShotNoise::default()).unwrap();
        assert_eq!(alice_estimator_single(&e, Quadrature::Q, 2.0).unwrap(), 0.0);
        let e = GaussianEnsemble::epr(10.0, ShotNoise::default()).unwrap();
        let qa = alice_estimator_single(&e, Quadrature::Q, 2.0).unwrap();
        assert_relative_eq!(qa, 2.0 * 99f64.sqrt() / 10.0, epsilon = 1e-14);
        assert!((qa - 1.98997).abs() < 1e-5);
    }

    #[test]
    fn single_estimator_residual_monte_carlo() {
        let e = GaussianEnsemble::epr(10.0, ShotNoise::default()).unwrap();
        let alpha = alice_estimator_single(&e, Quadrature::Q, 1.0).unwrap();
        let b = e.sample(1_000_000, 9).unwrap();
        let resid: Vec<f64> = b
            .column("Q")
            .unwrap()
            .iter()
            .zip(b.column("Q'").unwrap())
            .map(|(q, k)| q - alpha * k)
            .collect();
        let r = SampleBatch::from_columns(["r"], vec![resid], 9).unwrap();
        let v = r.conditional_variance("r", &[]).unwrap().variance;
        assert!((v / 0.1 - 1.0).abs() < 0.01, "{v}");
    }

    #[test]
    fn joint_measurement_conditionals() {
        for (v, mu) in [(10.0, 1.0), (10.0, 0.5), (4.0, 4.0), (40.0, 0.25)] {
            let e = joint_measurement_ensemble(v, mu, ShotNoise::default()).unwrap();
            let cq = e.condition_on("Q", &[QA]).unwrap().variance;
            let cp = e.condition_on("P", &[PA]).unwrap().variance;
            let s = squeezing_of(v, mu).unwrap();
            assert_relative_eq!(cq, s, epsilon = 1e-9);
            assert_relative_eq!(cq * cp, 1.0, epsilon = 1e-9);
        }
        let e = joint_measurement_ensemble(10.0, 0.5, ShotNoise::default()).unwrap();
        assert_relative_eq!(
            e.condition_on("Q", &[QA]).unwrap().variance,
            6.0 / 10.5,
            epsilon = 1e-12
        );
    }

    #[test]
    fn joint_measurement_is_a_beamsplitter_and_two_homodynes() {
        let (v, mu) = (10.0, 0.5);
        let t = mu_to_transmission(mu).unwrap();
        let e = GaussianEnsemble::epr(v, ShotNoise::default())
            .unwrap()
            .direct_sum(&GaussianEnsemble::vacuum(["Qv", "Pv"], ShotNoise::default()).unwrap())
            .unwrap()
            .beamsplitter("Q'", "Qv", t)
            .unwrap()
            .beamsplitter("P'", "Pv", t)
            .unwrap();
        // Q is read on the first output port, P on the second.
        let s = squeezing_of(v, mu).unwrap();
        assert_relative_eq!(e.condition_on("Q", &["Q'"]).unwrap().variance, s, epsilon = 1e-12);
        assert_relative_eq!(e.condition_on("P", &["Pv"]).unwrap().variance, 1.0 / s, epsilon = 1e-12);
    }

    #[test]
    fn prepared_state_products() {
        let cfg = PreparationConfig::joint(10.0, 0.5);
        let p = prepare_direct(&cfg, 100, 1).unwrap();
        let st = p.state(3);
        assert_relative_eq!(st.conditional_q * st.conditional_p, 1.0, epsilon = 1e-12);
        assert_relative_eq!(st.squeezing, st.conditional_q, epsilon = 1e-15);
    }

    #[test]
    fn epr_route_monte_carlo_conditional() {
        let cfg = PreparationConfig::joint(10.0, 0.5);
        let b = prepare_via_epr(&cfg, 1_000_000, 4).unwrap().joint_batch().unwrap();
        let cv = b.conditional_variance("Q", &[QA]).unwrap().variance;
        assert!((cv / (6.0 / 10.5) - 1.0).abs() < 0.01, "{cv}");
    }

    #[test]
    fn direct_route_variances() {
        let e = analytic_joint_covariance(10.0, 1.0, ShotNoise::default()).unwrap();
        assert_relative_eq!(e.variance(QA).unwrap(), 9.0, epsilon = 1e-12);
        assert_relative_eq!(e.variance(PA).unwrap(), 9.0, epsilon = 1e-12);
        assert_relative_eq!(e.variance("Q").unwrap(), 10.0, epsilon = 1e-12);

        let e = analytic_joint_covariance(10.0, 0.1, ShotNoise::default()).unwrap();
        assert_relative_eq!(e.variance(QA).unwrap(), 9.9, epsilon = 1e-12);
        assert_relative_eq!(e.condition_on("Q", &[QA]).unwrap().variance, 0.1, epsilon = 1e-12);

        let cfg = PreparationConfig::coherent(1.0);
        let p = prepare_direct(&cfg, 1000, 2).unwrap();
        assert!(p.alice.column(QA).unwrap().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn single_mode_routes_record_basis() {
        let cfg = PreparationConfig::epr(10.0);
        let a = prepare_via_epr(&cfg, 10_000, 5).unwrap();
        let b = prepare_direct(&cfg, 10_000, 5).unwrap();
        assert_eq!(a.basis, b.basis);
        let bases = a.basis.as_ref().unwrap();
        let q_count = bases.iter().filter(|b| **b == Quadrature::Q).count();
        assert!((q_count as f64 - 5000.0).abs() < 3.0 * 50.0);
        let i = bases.iter().position(|b| *b == Quadrature::Q).unwrap();
        let st = a.state(i);
        assert!(st.pa.is_none() && st.qa.is_some());
        assert_relative_eq!(st.squeezing, 0.1);
    }

    #[test]
    fn mode_validation() {
        assert!(prepare_direct(&PreparationConfig::joint(10.0, 0.0), 10, 0).is_err());
        assert!(prepare_direct(&PreparationConfig::joint(0.5, 1.0), 10, 0).is_err());
    }

    #[test]
    fn estimator_residual_is_orthogonal() {
        let cfg = PreparationConfig::joint(4.0, 0.25);
        let b = prepare_via_epr(&cfg, 100_000, 8).unwrap().joint_batch().unwrap();
        let qa = b.column(QA).unwrap();
        let q = b.column("Q").unwrap();
        let n = qa.len() as f64;
        let resid: Vec<f64> = q.iter().zip(qa).map(|(x, a)| x - a).collect();
        let cross: f64 = resid.iter().zip(qa).map(|(r, a)| r * a).sum::<f64>() / n;
        let va = qa.iter().map(|a| a * a).sum::<f64>() / n;
        let vr = resid.iter().map(|r| r * r).sum::<f64>() / n;
        let se = (va * vr / n).sqrt();
        assert!(cross.abs() < 5.0 * se, "{cross} vs {se}");
    }
}
