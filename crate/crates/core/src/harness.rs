//! Seeded end-to-end Monte Carlo: prepare, transmit (optionally through the
//! entangling cloner), measure, and estimate conditional variances and
//! Gaussian mutual informations with standard errors.

use std::f64::consts::LN_2;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{self, ChannelModel, EntanglingCloner, PB, QB};
use crate::error::{Error, Result};
use crate::gaussian::{GaussianEnsemble, Quadrature, SampleBatch};
use crate::preparation::{
    analytic_joint_covariance, prepare_direct, prepare_via_epr, PreparationConfig, PreparationMode, Prepared, PA, QA,
};
use crate::rng::{self, tag};

/// Acceptance gate on `|z|` for every analytic-versus-empirical comparison.
pub const Z_GATE: f64 = 5.0;

/// Resamples used by the bootstrap cross-check.
pub const BOOTSTRAP_RESAMPLES: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attack {
    None,
    EntanglingCloner,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BobBasis {
    FixedQ,
    Random,
}

/// Which of Alice's equivalent boxes generates the states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    Direct,
    Epr,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub prep: PreparationConfig,
    pub channel: ChannelModel,
    pub attack: Attack,
    pub n: usize,
    pub seed: u64,
    pub bob_basis: BobBasis,
    pub route: Route,
}

impl RunConfig {
    pub fn new(prep: PreparationConfig, channel: ChannelModel, n: usize, seed: u64) -> Self {
        Self {
            prep,
            channel,
            attack: Attack::None,
            n,
            seed,
            bob_basis: BobBasis::FixedQ,
            route: Route::Direct,
        }
    }

    pub fn with_attack(mut self, attack: Attack) -> Self {
        self.attack = attack;
        self
    }

    pub fn with_bob_basis(mut self, basis: BobBasis) -> Self {
        self.bob_basis = basis;
        self
    }

    pub fn with_route(mut self, route: Route) -> Self {
        self.route = route;
        self
    }
}

/// A point estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
}

impl Estimate {
    /// `(value − expected)/stderr`; zero when both the error and the stderr vanish.
    pub fn z(&self, expected: f64) -> f64 {
        let d = self.value - expected;
        if d == 0.0 {
            0.0
        } else {
            d / self.stderr
        }
    }
}

/// Gaussian mutual information `−½·log2(1 − R²)` between `target` and the
/// least-squares fit on `given`. The standard error is the delta-method term
/// `R/(ln2·√n)` plus the `k/(n·ln2)` small-sample bias of `R²`.
pub fn gaussian_mutual_information(b: &SampleBatch, target: &str, given: &[&str]) -> Result<Estimate> {
    let c = b.conditional_variance(target, given)?;
    let n = b.n() as f64;
    let r2 = c.r_squared.clamp(0.0, 1.0);
    let k = (b.n() - c.dof) as f64;
    Ok(Estimate {
        value: -0.5 * (1.0 - r2).log2(),
        stderr: (r2.sqrt() / n.sqrt() + k / n) / LN_2,
    })
}

fn conditional_estimate(b: &SampleBatch, target: &str, given: &[&str]) -> Result<Estimate> {
    let c = b.conditional_variance(target, given)?;
    Ok(Estimate {
        value: c.variance,
        stderr: c.stderr,
    })
}

/// Paired real-valued key elements after basis sifting.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct KeyElements {
    pub alice: Vec<f64>,
    pub bob: Vec<f64>,
    pub quadrature: Vec<Quadrature>,
}

impl KeyElements {
    pub fn len(&self) -> usize {
        self.alice.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alice.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub seed: u64,
    pub n: usize,
    /// Empirical moments of `(Q_A, P_A, Q_B, P_B)` plus Eve's records under
    /// attack.
    pub empirical_cov: GaussianEnsemble,
    /// Statistics below are taken on the Q-quadrature rows kept by sifting.
    pub q_rows: usize,
    pub v_ba_hat: Estimate,
    pub v_be_hat: Option<Estimate>,
    pub i_ba_hat: Estimate,
    pub i_be_hat: Option<Estimate>,
    /// Fraction of symbols whose bases agree.
    pub sifted_fraction: Estimate,
    pub key: KeyElements,
}

/// Values the analytic layer predicts for [`RunResult`] statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Analytic {
    pub v_ba: f64,
    pub v_be: f64,
    pub i_ba: f64,
    pub i_be: f64,
}

/// Squeezing of the Q-quadrature rows used by the statistics.
fn q_row_squeezing(prep: &PreparationConfig) -> f64 {
    match prep.mode {
        PreparationMode::Joint { .. } => prep.squeezing().expect("joint mode"),
        PreparationMode::SingleQuadrature { .. } => 1.0 / prep.v,
    }
}

pub fn analytic(cfg: &RunConfig) -> Result<Analytic> {
    let n0 = cfg.prep.n0;
    let (v, s) = (cfg.prep.v, q_row_squeezing(&cfg.prep));
    let ch = &cfg.channel;
    let (v_ba, _) = channel::alice_conditional_variance(ch, v, s, n0)?;
    let (v_be, _) = channel::eve_conditional_variance_bound(ch, v, n0)?;
    let var_b = ch.g_q * (v + ch.chi_q) * n0.value();
    Ok(Analytic {
        v_ba,
        v_be,
        i_ba: 0.5 * (var_b / v_ba).log2(),
        i_be: 0.5 * (var_b / v_be).log2(),
    })
}

fn draw_bob_bases(policy: BobBasis, n: usize, seed: u64) -> Vec<Quadrature> {
    match policy {
        BobBasis::FixedQ => vec![Quadrature::Q; n],
        BobBasis::Random => {
            let mut coin = rng::substream(rng::derive_seed(seed, tag::BOB_BASIS), 0);
            (0..n)
                .map(|_| {
                    if coin.random::<bool>() {
                        Quadrature::Q
                    } else {
                        Quadrature::P
                    }
                })
                .collect()
        }
    }
}

pub fn run(cfg: &RunConfig) -> Result<RunResult> {
    cfg.prep.validate()?;
    cfg.channel.validate()?;
    if cfg.n < 2 {
        return Err(Error::param("n", "a run needs at least two symbols"));
    }
    let prepared: Prepared = match cfg.route {
        Route::Direct => prepare_direct(&cfg.prep, cfg.n, cfg.seed)?,
        Route::Epr => prepare_via_epr(&cfg.prep, cfg.n, cfg.seed)?,
    };
    let (bob, eve) = match cfg.attack {
        Attack::None => (
            cfg.channel.propagate(&prepared.transmitted, cfg.prep.n0, cfg.seed)?,
            None,
        ),
        Attack::EntanglingCloner => {
            let out = EntanglingCloner::new(&cfg.channel, cfg.prep.n0)?.attack(&prepared.transmitted, cfg.seed)?;
            (out.bob.clone(), Some(out))
        }
    };
    let mut joint = prepared.alice.join(&bob)?;
    if let Some(out) = &eve {
        joint = joint.join(&out.eve)?;
    }

    let bob_bases = draw_bob_bases(cfg.bob_basis, cfg.n, cfg.seed);
    let alice_bases = prepared.basis.as_deref();
    let agrees = |i: usize| alice_bases.is_none_or(|a| a[i] == bob_bases[i]);
    let keep: Vec<bool> = (0..cfg.n).map(agrees).collect();
    let kept = keep.iter().filter(|k| **k).count();
    let q_mask: Vec<bool> = (0..cfg.n).map(|i| keep[i] && bob_bases[i] == Quadrature::Q).collect();
    let q_rows = joint.select_rows(&q_mask)?;

    let v_ba_hat = conditional_estimate(&q_rows, QB, &[QA])?;
    let i_ba_hat = gaussian_mutual_information(&q_rows, QB, &[QA])?;
    let (v_be_hat, i_be_hat) = match &eve {
        Some(out) => {
            let record = out.eve_record(Quadrature::Q);
            (
                Some(conditional_estimate(&q_rows, QB, &record)?),
                Some(gaussian_mutual_information(&q_rows, QB, &record)?),
            )
        }
        None => (None, None),
    };

    let (qa, pa) = (joint.column(QA)?, joint.column(PA)?);
    let (qb, pb) = (joint.column(QB)?, joint.column(PB)?);
    let mut key = KeyElements::default();
    for i in (0..cfg.n).filter(|&i| keep[i]) {
        let (a, b) = match bob_bases[i] {
            Quadrature::Q => (qa[i], qb[i]),
            Quadrature::P => (pa[i], pb[i]),
        };
        key.alice.push(a);
        key.bob.push(b);
        key.quadrature.push(bob_bases[i]);
    }

    let n = cfg.n as f64;
    let p = kept as f64 / n;
    let p_expected = if alice_bases.is_some() && cfg.bob_basis == BobBasis::Random {
        0.5
    } else {
        p
    };
    Ok(RunResult {
        seed: cfg.seed,
        n: cfg.n,
        empirical_cov: joint.empirical_ensemble()?,
        q_rows: q_rows.n(),
        v_ba_hat,
        v_be_hat,
        i_ba_hat,
        i_be_hat,
        sifted_fraction: Estimate {
            value: p,
            stderr: (p_expected * (1.0 - p_expected) / n).sqrt(),
        },
        key,
    })
}

/// One grid point of a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub g: f64,
    pub eps: f64,
    pub v: f64,
    pub mu: f64,
}

/// Cartesian product of the four axes, in row-major order.
pub fn grid(gs: &[f64], epss: &[f64], vs: &[f64], mus: &[f64]) -> Vec<SweepPoint> {
    let mut out = Vec::with_capacity(gs.len() * epss.len() * vs.len() * mus.len());
    for &g in gs {
        for &eps in epss {
            for &v in vs {
                for &mu in mus {
                    out.push(SweepPoint { g, eps, v, mu });
                }
            }
        }
    }
    out
}

/// Analytic value, estimate, standard error and z-score of one statistic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub analytic: f64,
    pub empirical: f64,
    pub stderr: f64,
    pub z: f64,
}

impl Comparison {
    fn new(analytic: f64, e: Estimate) -> Self {
        Self {
            analytic,
            empirical: e.value,
            stderr: e.stderr,
            z: e.z(analytic),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub index: usize,
    pub point: SweepPoint,
    pub n: usize,
    pub seed: u64,
    pub v_ba: Comparison,
    pub i_ba: Comparison,
    pub v_be: Option<Comparison>,
    pub i_be: Option<Comparison>,
}

impl SweepRow {
    pub fn max_abs_z(&self) -> f64 {
        [Some(self.v_ba), Some(self.i_ba), self.v_be, self.i_be]
            .into_iter()
            .flatten()
            .fold(0.0, |m, c| m.max(c.z.abs()))
    }

    pub fn flagged(&self) -> bool {
        !(self.max_abs_z() <= Z_GATE)
    }
}

/// Runs `template` at every grid point. Point `i` uses the seed
/// `derive_seed(derive_seed(template.seed, GRID_POINT), i)`.
pub fn sweep(points: &[SweepPoint], template: &RunConfig) -> Result<Vec<SweepRow>> {
    if points.is_empty() {
        return Err(Error::param("points", "sweep grid is empty"));
    }
    let grid_seed = rng::derive_seed(template.seed, tag::GRID_POINT);
    points
        .par_iter()
        .enumerate()
        .map(|(index, point)| {
            let mut cfg = *template;
            cfg.seed = rng::derive_seed(grid_seed, index as u64);
            cfg.channel = ChannelModel::from_excess(point.g, point.eps)?;
            cfg.prep.v = point.v;
            if let PreparationMode::Joint { .. } = cfg.prep.mode {
                cfg.prep.mode = PreparationMode::Joint { mu: point.mu };
            }
            let expected = analytic(&cfg)?;
            let r = run(&cfg)?;
            Ok(SweepRow {
                index,
                point: *point,
                n: cfg.n,
                seed: cfg.seed,
                v_ba: Comparison::new(expected.v_ba, r.v_ba_hat),
                i_ba: Comparison::new(expected.i_ba, r.i_ba_hat),
                v_be: r.v_be_hat.map(|e| Comparison::new(expected.v_be, e)),
                i_be: r.i_be_hat.map(|e| Comparison::new(expected.i_be, e)),
            })
        })
        .collect()
}

/// Standard deviation of `statistic` over [`BOOTSTRAP_RESAMPLES`] resamples
/// of the rows of `b`.
pub fn bootstrap_stderr<F>(b: &SampleBatch, seed: u64, statistic: F) -> Result<f64>
where
    F: Fn(&SampleBatch) -> Result<f64> + Sync,
{
    let n = b.n();
    let base = rng::derive_seed(seed, tag::BOOTSTRAP);
    let values: Vec<f64> = (0..BOOTSTRAP_RESAMPLES)
        .into_par_iter()
        .map(|r| {
            let mut gen = rng::substream(base, r as u64);
            let idx: Vec<usize> = (0..n).map(|_| gen.random_range(0..n)).collect();
            let columns = b
                .labels()
                .iter()
                .map(|l| {
                    let col = b.column(l)?;
                    Ok(idx.iter().map(|&i| col[i]).collect())
                })
                .collect::<Result<Vec<Vec<f64>>>>()?;
            statistic(&SampleBatch::from_columns(b.labels().to_vec(), columns, seed)?)
        })
        .collect::<Result<_>>()?;
    let m = values.len() as f64;
    let mean = values.iter().sum::<f64>() / m;
    Ok((values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt())
}

/// Entrywise comparison of the `(Q_A, P_A, Q, P)` covariances produced by the
/// two preparation routes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Equivalence {
    pub v: f64,
    pub mu: f64,
    pub n: usize,
    /// Row-major z-scores of the 4×4 difference.
    pub z: Vec<f64>,
    pub max_abs_z: f64,
}

pub fn black_box_equivalence(v: f64, mu: f64, n: usize, seed: u64) -> Result<Equivalence> {
    let cfg = PreparationConfig::joint(v, mu);
    let epr = prepare_via_epr(&cfg, n, rng::derive_seed(seed, 0))?
        .joint_batch()?
        .covariance();
    let direct = prepare_direct(&cfg, n, rng::derive_seed(seed, 1))?
        .joint_batch()?
        .covariance();
    let s = cfg.squeezing().expect("joint mode");
    let sigma = analytic_joint_covariance(v, s, cfg.n0)?;
    let sigma = sigma.cov();
    let mut z = Vec::with_capacity(16);
    for i in 0..4 {
        for j in 0..4 {
            let var_entry = (sigma[(i, i)] * sigma[(j, j)] + sigma[(i, j)].powi(2)) / n as f64;
            let d = epr[(i, j)] - direct[(i, j)];
            z.push(if d == 0.0 { 0.0 } else { d / (2.0 * var_entry).sqrt() });
        }
    }
    let max_abs_z = z.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    Ok(Equivalence { v, mu, n, z, max_abs_z })
}
