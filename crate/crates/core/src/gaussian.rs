//! Linear-Gaussian algebra on labelled quadratures.
//!
//! All variances are carried in shot-noise units multiplied by an explicit
//! [`ShotNoise`] value. The commutator convention is `[Q, P] = 2i·N0`, so a
//! vacuum quadrature has variance `N0` and Heisenberg products are bounded
//! below by `N0²`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Relative tolerance of the symmetry and positive-semidefiniteness gates.
pub const PSD_TOLERANCE: f64 = 1e-9;

/// Eigenvalues of a conditioning block below this fraction of the largest one
/// are treated as zero (pseudo-inverse).
const RANK_TOLERANCE: f64 = 1e-12;

/// Labels of the four quadratures produced by [`GaussianEnsemble::epr`].
pub mod labels {
    /// Quadratures of the beam Alice keeps.
    pub const Q_KEPT: &str = "Q'";
    pub const P_KEPT: &str = "P'";
    /// Quadratures of the beam sent down the line.
    pub const Q: &str = "Q";
    pub const P: &str = "P";
}

/// The shot-noise variance `N0`, the unit of every variance in the crate.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct ShotNoise(f64);

impl ShotNoise {
    pub fn new(n0: f64) -> Result<Self> {
        if n0.is_finite() && n0 > 0.0 {
            Ok(Self(n0))
        } else {
            Err(Error::param("n0", format!("must be positive and finite, got {n0}")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for ShotNoise {
    fn default() -> Self {
        Self(1.0)
    }
}

impl TryFrom<f64> for ShotNoise {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ShotNoise> for f64 {
    fn from(n0: ShotNoise) -> f64 {
        n0.0
    }
}

/// One of the two conjugate quadratures of a mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Quadrature {
    Q,
    P,
}

impl Quadrature {
    pub fn conjugate(self) -> Self {
        match self {
            Quadrature::Q => Quadrature::P,
            Quadrature::P => Quadrature::Q,
        }
    }
}

/// Result of conditioning one variable on a set of others.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conditional {
    pub variance: f64,
    /// The conditioning block was singular and a pseudo-inverse was used.
    pub degenerate: bool,
}

/// Mean vector and covariance matrix of a set of labelled quadratures.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianEnsemble {
    labels: Vec<String>,
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

fn check_unique(labels: &[String]) -> Result<()> {
    for (i, l) in labels.iter().enumerate() {
        if labels[..i].contains(l) {
            return Err(Error::DuplicateLabel(l.clone()));
        }
    }
    Ok(())
}

fn max_abs_diagonal(m: &DMatrix<f64>) -> f64 {
    m.diagonal().iter().fold(0.0_f64, |acc, d| acc.max(d.abs()))
}

/// Moore-Penrose inverse of a symmetric PSD block; the flag reports rank loss.
fn symmetric_pinv(block: DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let eig = SymmetricEigen::new(block);
    let largest = eig.eigenvalues.iter().fold(0.0_f64, |a, &l| a.max(l.abs()));
    let cutoff = RANK_TOLERANCE * largest;
    let mut degenerate = largest == 0.0;
    let inv = DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|&l| {
            if l > cutoff {
                1.0 / l
            } else {
                degenerate = true;
                0.0
            }
        }),
    );
    let u = &eig.eigenvectors;
    (u * DMatrix::from_diagonal(&inv) * u.transpose(), degenerate)
}

impl GaussianEnsemble {
    /// Validated constructor: dimensions agree, labels are unique, the
    /// covariance is symmetric and PSD to [`PSD_TOLERANCE`].
    pub fn new<S: Into<String>>(
        labels: impl IntoIterator<Item = S>,
        mean: DVector<f64>,
        cov: DMatrix<f64>,
    ) -> Result<Self> {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        let k = labels.len();
        if k == 0 {
            return Err(Error::Dimension("ensemble needs at least one quadrature".into()));
        }
        if mean.len() != k || cov.nrows() != k || cov.ncols() != k {
            return Err(Error::Dimension(format!(
                "{k} labels, mean of length {}, covariance {}x{}",
                mean.len(),
                cov.nrows(),
                cov.ncols()
            )));
        }
        check_unique(&labels)?;
        if cov.iter().chain(mean.iter()).any(|x| !x.is_finite()) {
            return Err(Error::param("cov", "entries must be finite"));
        }
        let scale = max_abs_diagonal(&cov);
        let asym = (&cov - cov.transpose()).amax();
        if asym > PSD_TOLERANCE * scale.max(f64::MIN_POSITIVE) {
            return Err(Error::NotSymmetric(asym));
        }
        let cov = (&cov + cov.transpose()) * 0.5;
        let min_eig = cov.symmetric_eigenvalues().min();
        if min_eig < -PSD_TOLERANCE * scale {
            return Err(Error::NotPositiveSemidefinite(min_eig));
        }
        Ok(Self { labels, mean, cov })
    }

    pub fn zero_mean<S: Into<String>>(labels: impl IntoIterator<Item = S>, cov: DMatrix<f64>) -> Result<Self> {
        let k = cov.nrows();
        Self::new(labels, DVector::zeros(k), cov)
    }

    /// Independent zero-mean quadratures with the given variances.
    pub fn independent<S: Into<String>>(labels: impl IntoIterator<Item = S>, variances: &[f64]) -> Result<Self> {
        if let Some(v) = variances.iter().find(|v| !(**v >= 0.0)) {
            return Err(Error::param("variance", format!("must be non-negative, got {v}")));
        }
        Self::zero_mean(labels, DMatrix::from_diagonal(&DVector::from_column_slice(variances)))
    }

    /// Vacuum on every label: `N0 · I`.
    pub fn vacuum<S: Into<String>>(labels: impl IntoIterator<Item = S>, n0: ShotNoise) -> Result<Self> {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        let variances = vec![n0.value(); labels.len()];
        Self::independent(labels, &variances)
    }

    /// Two-mode EPR state over `(Q', P', Q, P)` with modulation variance `v`.
    pub fn epr(v: f64, n0: ShotNoise) -> Result<Self> {
        Self::epr_labeled(v, n0, [labels::Q_KEPT, labels::P_KEPT, labels::Q, labels::P])
    }

    /// EPR state with caller-chosen labels, ordered `(Q1, P1, Q2, P2)`.
    ///
    /// Q quadratures are correlated by `+√(v²−1)·N0`, P quadratures
    /// anticorrelated by the same amount; both beams have variance `v·N0`.
    pub fn epr_labeled(v: f64, n0: ShotNoise, names: [&str; 4]) -> Result<Self> {
        if !(v >= 1.0) || !v.is_finite() {
            return Err(Error::param(
                "v",
                format!("modulation variance must be >= 1 (sub-vacuum otherwise), got {v}"),
            ));
        }
        let n0 = n0.value();
        let c = (v * v - 1.0).sqrt() * n0;
        let d = v * n0;
        #[rustfmt::skip]
        let cov = DMatrix::from_row_slice(4, 4, &[
            d,   0.0, c,   0.0,
            0.0, d,   0.0, -c,
            c,   0.0, d,   0.0,
            0.0, -c,  0.0, d,
        ]);
        Self::zero_mean(names, cov)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn dim(&self) -> usize {
        self.labels.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn index_of(&self, label: &str) -> Result<usize> {
        self.labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::UnknownLabel(label.to_owned()))
    }

    fn indices(&self, labels: &[&str]) -> Result<Vec<usize>> {
        labels.iter().map(|l| self.index_of(l)).collect()
    }

    pub fn variance(&self, label: &str) -> Result<f64> {
        let i = self.index_of(label)?;
        Ok(self.cov[(i, i)])
    }

    pub fn covariance(&self, a: &str, b: &str) -> Result<f64> {
        Ok(self.cov[(self.index_of(a)?, self.index_of(b)?)])
    }

    /// Every variance multiplied by `c`, every mean by `√c` (an `N0 → c·N0`
    /// change of units).
    pub fn rescaled(&self, c: f64) -> Result<Self> {
        if !(c > 0.0) {
            return Err(Error::param("c", "scale must be positive"));
        }
        Ok(Self {
            labels: self.labels.clone(),
            mean: &self.mean * c.sqrt(),
            cov: &self.cov * c,
        })
    }

    /// Joint ensemble of two independent ensembles.
    pub fn direct_sum(&self, other: &GaussianEnsemble) -> Result<Self> {
        let (k1, k2) = (self.dim(), other.dim());
        let mut cov = DMatrix::zeros(k1 + k2, k1 + k2);
        cov.view_mut((0, 0), (k1, k1)).copy_from(&self.cov);
        cov.view_mut((k1, k1), (k2, k2)).copy_from(&other.cov);
        let mean = DVector::from_iterator(k1 + k2, self.mean.iter().chain(other.mean.iter()).copied());
        let labels: Vec<String> = self.labels.iter().chain(&other.labels).cloned().collect();
        check_unique(&labels)?;
        Ok(Self { labels, mean, cov })
    }

    pub fn relabel(&self, from: &str, to: &str) -> Result<Self> {
        let i = self.index_of(from)?;
        if from != to && self.labels.iter().any(|l| l == to) {
            return Err(Error::DuplicateLabel(to.to_owned()));
        }
        let mut out = self.clone();
        out.labels[i] = to.to_owned();
        Ok(out)
    }

    /// Sub-ensemble over `labels`, in that order.
    pub fn marginal(&self, labels: &[&str]) -> Result<Self> {
        let idx = self.indices(labels)?;
        let k = idx.len();
        let cov = DMatrix::from_fn(k, k, |r, c| self.cov[(idx[r], idx[c])]);
        let mean = DVector::from_fn(k, |r, _| self.mean[idx[r]]);
        let labels: Vec<String> = labels.iter().map(|s| (*s).to_owned()).collect();
        check_unique(&labels)?;
        Ok(Self { labels, mean, cov })
    }

    /// Appends `label = Σ coeff·term` as a new, exactly dependent variable.
    pub fn with_combination(&self, label: &str, terms: &[(&str, f64)]) -> Result<Self> {
        if self.labels.iter().any(|l| l == label) {
            return Err(Error::DuplicateLabel(label.to_owned()));
        }
        let k = self.dim();
        let mut w = DVector::zeros(k);
        for (name, coeff) in terms {
            w[self.index_of(name)?] += coeff;
        }
        let cross = &self.cov * &w;
        let var = w.dot(&cross);
        let mut cov = DMatrix::zeros(k + 1, k + 1);
        cov.view_mut((0, 0), (k, k)).copy_from(&self.cov);
        for i in 0..k {
            cov[(i, k)] = cross[i];
            cov[(k, i)] = cross[i];
        }
        cov[(k, k)] = var;
        let mut mean = self.mean.clone().resize_vertically(k + 1, 0.0);
        mean[k] = w.dot(&self.mean);
        let mut labels = self.labels.clone();
        labels.push(label.to_owned());
        Ok(Self { labels, mean, cov })
    }

    /// Beamsplitter of intensity transmission `t` acting on two variables.
    ///
    /// `in1` is replaced by `√t·x1 + √(1−t)·x2` and `in2` by
    /// `√t·x2 − √(1−t)·x1`. For a physical beamsplitter between two modes apply
    /// it once to the Q pair and once to the P pair.
    pub fn beamsplitter(&self, in1: &str, in2: &str, t: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::param("t", format!("transmission must lie in [0, 1], got {t}")));
        }
        let (i, j) = (self.index_of(in1)?, self.index_of(in2)?);
        if i == j {
            return Err(Error::param("in2", "beamsplitter inputs must be distinct"));
        }
        let (c, s) = (t.sqrt(), (1.0 - t).sqrt());
        let mut m = DMatrix::<f64>::identity(self.dim(), self.dim());
        m[(i, i)] = c;
        m[(i, j)] = s;
        m[(j, i)] = -s;
        m[(j, j)] = c;
        Ok(Self {
            labels: self.labels.clone(),
            mean: &m * &self.mean,
            cov: &m * &self.cov * m.transpose(),
        })
    }

    /// `Var(target) − c·Σ⁺·cᵀ`: the residual variance of the best linear
    /// estimate of `target` from the `given` variables.
    pub fn condition_on(&self, target: &str, given: &[&str]) -> Result<Conditional> {
        let t = self.index_of(target)?;
        let g = self.indices(given)?;
        if g.contains(&t) {
            return Err(Error::param(
                "given",
                format!("target `{target}` is in the conditioning set"),
            ));
        }
        let var = self.cov[(t, t)];
        if g.is_empty() {
            return Ok(Conditional {
                variance: var,
                degenerate: false,
            });
        }
        let k = g.len();
        let block = DMatrix::from_fn(k, k, |r, c| self.cov[(g[r], g[c])]);
        let cross = DVector::from_fn(k, |r, _| self.cov[(t, g[r])]);
        let (pinv, degenerate) = symmetric_pinv(block);
        let explained = cross.dot(&(&pinv * &cross));
        Ok(Conditional {
            variance: var - explained,
            degenerate,
        })
    }

    /// `L` with `L·Lᵀ = cov`, from a symmetric eigendecomposition with tiny
    /// negative eigenvalues clipped to zero.
    fn factor(&self) -> DMatrix<f64> {
        let eig = SymmetricEigen::new(self.cov.clone());
        let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
        eig.eigenvectors * DMatrix::from_diagonal(&roots)
    }

    /// `n` i.i.d. draws, reproducible from `(seed, n, self)` and independent
    /// of the number of worker threads.
    pub fn sample(&self, n: usize, seed: u64) -> Result<SampleBatch> {
        if n == 0 {
            return Err(Error::param("n", "sample count must be at least 1"));
        }
        let k = self.dim();
        let factor = self.factor();
        let f: Vec<f64> = (0..k * k).map(|i| factor[(i / k, i % k)]).collect();
        let mean: Vec<f64> = self.mean.iter().copied().collect();
        let parts: Vec<(usize, Vec<f64>)> = rng::chunks(n)
            .collect::<Vec<_>>()
            .into_par_iter()
            .map(|(id, range)| {
                let mut gen = rng::substream(seed, id);
                let mut out = vec![0.0; range.len() * k];
                let mut z = vec![0.0; k];
                for row in out.chunks_exact_mut(k) {
                    for zi in z.iter_mut() {
                        *zi = gen.sample(StandardNormal);
                    }
                    for (i, x) in row.iter_mut().enumerate() {
                        let lrow = &f[i * k..(i + 1) * k];
                        *x = mean[i] + lrow.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
                (range.start, out)
            })
            .collect();
        let mut data = DMatrix::zeros(n, k);
        for (start, rows) in parts {
            for (r, row) in rows.chunks_exact(k).enumerate() {
                for (c, x) in row.iter().enumerate() {
                    data[(start + r, c)] = *x;
                }
            }
        }
        Ok(SampleBatch {
            labels: self.labels.clone(),
            data,
            seed,
        })
    }
}

/// Residual-variance estimate from a least-squares fit on samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalConditional {
    pub variance: f64,
    /// Chi-square standard error `variance·√(2/dof)`.
    pub stderr: f64,
    pub dof: usize,
    pub degenerate: bool,
    /// `1 − RSS/Σy²`: fraction of the target's second moment explained.
    pub r_squared: f64,
}

/// `n × k` matrix of draws, one column per quadrature label.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    labels: Vec<String>,
    data: DMatrix<f64>,
    seed: u64,
}

impl SampleBatch {
    pub fn from_columns<S: Into<String>>(
        labels: impl IntoIterator<Item = S>,
        columns: Vec<Vec<f64>>,
        seed: u64,
    ) -> Result<Self> {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        check_unique(&labels)?;
        if labels.len() != columns.len() || labels.is_empty() {
            return Err(Error::Dimension(format!(
                "{} labels for {} columns",
                labels.len(),
                columns.len()
            )));
        }
        let n = columns[0].len();
        if columns.iter().any(|c| c.len() != n) {
            return Err(Error::Dimension("columns have different lengths".into()));
        }
        let flat: Vec<f64> = columns.into_iter().flatten().collect();
        Ok(Self {
            data: DMatrix::from_vec(n, labels.len(), flat),
            labels,
            seed,
        })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn n(&self) -> usize {
        self.data.nrows()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn index_of(&self, label: &str) -> Result<usize> {
        self.labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::UnknownLabel(label.to_owned()))
    }

    pub fn column(&self, label: &str) -> Result<&[f64]> {
        let j = self.index_of(label)?;
        let n = self.n();
        Ok(&self.data.as_slice()[j * n..(j + 1) * n])
    }

    /// Columns of `self` followed by those of `other` (same row count).
    pub fn join(&self, other: &SampleBatch) -> Result<Self> {
        if self.n() != other.n() {
            return Err(Error::Dimension(format!(
                "cannot join batches of {} and {} rows",
                self.n(),
                other.n()
            )));
        }
        let labels: Vec<String> = self.labels.iter().chain(&other.labels).cloned().collect();
        check_unique(&labels)?;
        let mut flat = self.data.as_slice().to_vec();
        flat.extend_from_slice(other.data.as_slice());
        Ok(Self {
            data: DMatrix::from_vec(self.n(), labels.len(), flat),
            labels,
            seed: self.seed,
        })
    }

    /// Rows where `keep` is true.
    pub fn select_rows(&self, keep: &[bool]) -> Result<Self> {
        if keep.len() != self.n() {
            return Err(Error::Dimension("row mask length differs from row count".into()));
        }
        let n = self.n();
        let columns = (0..self.labels.len())
            .map(|j| {
                let col = &self.data.as_slice()[j * n..(j + 1) * n];
                col.iter().zip(keep).filter_map(|(x, k)| k.then_some(*x)).collect()
            })
            .collect();
        Self::from_columns(self.labels.clone(), columns, self.seed)
    }

    /// Sample covariance (centred, `n − 1` denominator).
    pub fn covariance(&self) -> DMatrix<f64> {
        let n = self.n();
        let k = self.labels.len();
        let means: Vec<f64> = (0..k).map(|j| self.data.column(j).sum() / n as f64).collect();
        let mut cov = DMatrix::zeros(k, k);
        for a in 0..k {
            for b in a..k {
                let ca = self.data.column(a);
                let cb = self.data.column(b);
                let s: f64 = ca
                    .iter()
                    .zip(cb.iter())
                    .map(|(x, y)| (x - means[a]) * (y - means[b]))
                    .sum();
                cov[(a, b)] = s / (n as f64 - 1.0);
                cov[(b, a)] = cov[(a, b)];
            }
        }
        cov
    }

    /// Gaussian ensemble with the batch's empirical moments.
    pub fn empirical_ensemble(&self) -> Result<GaussianEnsemble> {
        let n = self.n() as f64;
        let mean = DVector::from_iterator(
            self.labels.len(),
            (0..self.labels.len()).map(|j| self.data.column(j).sum() / n),
        );
        GaussianEnsemble::new(self.labels.clone(), mean, self.covariance())
    }

    /// Residual variance of the no-intercept least-squares regression of
    /// `target` on `given`, with denominator `n − rank`.
    pub fn conditional_variance(&self, target: &str, given: &[&str]) -> Result<EmpiricalConditional> {
        let y = self.column(target)?;
        let xs: Vec<&[f64]> = given.iter().map(|g| self.column(g)).collect::<Result<_>>()?;
        let n = self.n();
        let p = xs.len();
        let needed = (10 * p).max(2);
        if n < needed {
            return Err(Error::InsufficientSamples { needed, have: n });
        }
        let tss: f64 = y.iter().map(|v| v * v).sum();
        let mut gram = DMatrix::<f64>::zeros(p, p);
        let mut rhs = DVector::<f64>::zeros(p);
        for a in 0..p {
            rhs[a] = xs[a].iter().zip(y).map(|(x, t)| x * t).sum();
            for b in a..p {
                let s: f64 = xs[a].iter().zip(xs[b]).map(|(u, v)| u * v).sum();
                gram[(a, b)] = s;
                gram[(b, a)] = s;
            }
        }
        let (pinv, degenerate) = if p == 0 {
            (DMatrix::zeros(0, 0), false)
        } else {
            symmetric_pinv(gram.clone())
        };
        let coef = &pinv * &rhs;
        let rank = if p == 0 {
            0
        } else {
            let eig = gram.symmetric_eigenvalues();
            let largest = eig.amax();
            eig.iter().filter(|&&l| l > RANK_TOLERANCE * largest).count()
        };
        let rss: f64 = (0..n)
            .map(|i| {
                let fit: f64 = (0..p).map(|a| coef[a] * xs[a][i]).sum();
                let r = y[i] - fit;
                r * r
            })
            .sum();
        let dof = n - rank;
        let variance = rss / dof as f64;
        Ok(EmpiricalConditional {
            variance,
            stderr: variance * (2.0 / dof as f64).sqrt(),
            dof,
            degenerate,
            r_squared: if tss > 0.0 { 1.0 - rss / tss } else { 0.0 },
        })
    }
}
