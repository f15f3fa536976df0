//! Key distillation: channel estimation on a sacrificed subset, quantile
//! slicing with Gray labels, sliced Cascade error correction with an explicit
//! message log, and Toeplitz privacy amplification.
//!
//! One party's codewords are the reference and never change: Bob's in reverse
//! reconciliation, Alice's in direct reconciliation. The other party decodes
//! the reference slices one at a time, most significant first, using her
//! real-valued data and the slices already corrected.

use std::f64::consts::SQRT_2;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use crate::channel::vacuum_noise;
use crate::error::{Error, Result};
use crate::harness::{KeyElements, RunConfig};
use crate::preparation::PreparationMode;
use crate::rng::{self, tag};
use crate::security;

pub const DEFAULT_SLICES: u32 = 4;
pub const DEFAULT_MARGIN_BITS: u64 = 64;
pub const DEFAULT_SACRIFICE: f64 = 0.1;
pub const DEFAULT_MAX_PASSES: usize = 16;
pub const MAX_SLICES: u32 = 8;

/// Passes run before the first post-correction digest comparison.
const MIN_PASSES: usize = 4;
/// Width, in standard errors, of the confidence intervals used for security.
const CI_SIGMAS: f64 = 3.0;
/// Expected both-direction parity leakage of Cascade per unit of `n·h2(p)`.
const CASCADE_LEAK_FACTOR: f64 = 2.4;
const DIGEST_BITS: u64 = 64;
/// Half-width above which a channel estimate is flagged as too coarse.
const CHI_CI_TARGET: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Bob corrects toward Alice.
    Direct,
    /// Alice corrects toward Bob.
    Reverse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Party {
    Alice,
    Bob,
}

impl Direction {
    pub fn reference(self) -> Party {
        match self {
            Direction::Direct => Party::Alice,
            Direction::Reverse => Party::Bob,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transfer {
    AliceToBob,
    BobToAlice,
}

impl Transfer {
    fn from(p: Party) -> Self {
        match p {
            Party::Alice => Transfer::AliceToBob,
            Party::Bob => Transfer::BobToAlice,
        }
    }
}

/// One public message. Every message is assumed fully known to Eve.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Message {
    /// Parity of the sender's bits at `block_indices` of one slice. A block of
    /// one index discloses that bit.
    Parity {
        round: u32,
        direction: Transfer,
        slice: u32,
        block_indices: Vec<u32>,
        parity_bit: u8,
    },
    /// Keyed 64-bit digest of the sender's whole slice.
    Digest {
        round: u32,
        direction: Transfer,
        slice: u32,
        digest: u64,
    },
    /// Whether the receiver's digest matched.
    Verdict {
        round: u32,
        direction: Transfer,
        slice: u32,
        accepted: bool,
    },
}

impl Message {
    pub fn leaked_bits(&self) -> u64 {
        match self {
            Message::Parity { .. } | Message::Verdict { .. } => 1,
            Message::Digest { .. } => DIGEST_BITS,
        }
    }
}

/// Channel parameters estimated from the sacrificed symbols.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelEstimate {
    pub g_hat: f64,
    pub g_stderr: f64,
    pub chi_hat: f64,
    pub chi_stderr: f64,
    pub eps_hat: f64,
    /// `[hat − 3σ, hat + 3σ]`.
    pub g_ci: (f64, f64),
    pub chi_ci: (f64, f64),
    pub sacrificed_fraction: f64,
    pub sacrificed: usize,
    /// The χ interval is wider than the target half-width.
    pub coarse: bool,
    /// Regression of Bob on Alice in units of `√N0`; `G = slope²`.
    pub slope: f64,
    pub slope_stderr: f64,
    pub residual: f64,
    pub residual_stderr: f64,
    /// Squeezing assumed for Alice's states when separating `χ`.
    pub s: f64,
}

impl ChannelEstimate {
    /// Eve's information per symbol at the estimate, and its upper
    /// confidence limit. In reverse reconciliation it is monotone in Bob's
    /// variance `A = G(V+χ)` and his minimal conditional variance
    /// `B = G(χ + 1/V)`. Both are linear in `(G, resid)`, whose errors are
    /// uncorrelated, so each gets an exact 3σ limit before the logarithm.
    pub fn eve_information(&self, direction: Direction, v: f64) -> Result<(f64, f64)> {
        let (g, g_se, r, r_se) = (self.g_hat, self.g_stderr, self.residual, self.residual_stderr);
        match direction {
            Direction::Reverse => {
                security::mutual_info_be_rr(g, 0.0, v)?;
                // χ ≥ 0 floors both factors.
                let a = g * (v - self.s) + r;
                let a_se = ((v - self.s) * g_se).hypot(r_se);
                let b = r - g * (self.s - 1.0 / v);
                let b_se = ((self.s - 1.0 / v) * g_se).hypot(r_se);
                let f = |a: f64, b: f64| (0.5 * (a.max(g * v) * b.max(g / v)).log2()).max(0.0);
                Ok((f(a, b), f(a + CI_SIGMAS * a_se, b + CI_SIGMAS * b_se)))
            }
            // Monotone in χ.
            Direction::Direct => Ok((
                eve_info_direct(self.chi_hat.max(0.0), v, self.s)?,
                eve_info_direct(self.chi_ci.1.max(0.0), v, self.s)?,
            )),
        }
    }
}

/// Which symbols are revealed, chosen by the public coin.
pub fn sacrifice_mask(n: usize, fraction: f64, seed: u64) -> Result<Vec<bool>> {
    if !(fraction > 0.0 && fraction <= 0.5) {
        return Err(Error::param(
            "sacrificed_fraction",
            format!("must lie in (0, 0.5], got {fraction}"),
        ));
    }
    let k = ((fraction * n as f64).round() as usize).max(1).min(n);
    let mut idx: Vec<u32> = (0..n as u32).collect();
    let mut coin = rng::substream(rng::derive_seed(seed, tag::PUBLIC_COIN), u64::MAX);
    let (chosen, _) = idx.partial_shuffle(&mut coin, k);
    let mut mask = vec![false; n];
    for &i in chosen.iter() {
        mask[i as usize] = true;
    }
    Ok(mask)
}

/// Least-squares slope of `y` on `x` (no intercept), its standard error, and
/// the residual variance with its standard error.
fn ols(x: &[f64], y: &[f64]) -> Result<(f64, f64, f64, f64)> {
    let n = x.len();
    if n < 10 {
        return Err(Error::InsufficientSamples { needed: 10, have: n });
    }
    let sxx: f64 = x.iter().map(|v| v * v).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    if sxx == 0.0 {
        return Err(Error::param("alice_values", "no modulation on the sacrificed symbols"));
    }
    let slope = sxy / sxx;
    let dof = (n - 1) as f64;
    let rss: f64 = x.iter().zip(y).map(|(a, b)| (b - slope * a).powi(2)).sum();
    let resid = rss / dof;
    Ok((slope, (resid / sxx).sqrt(), resid, resid * (2.0 / dof).sqrt()))
}

/// Estimates `G` from the squared slope of Bob's values on Alice's and `χ`
/// from the residual variance: `resid = G·(χ + s)·N0`.
pub fn estimate_channel(alice: &[f64], bob: &[f64], mask: &[bool], s: f64, n0: f64) -> Result<ChannelEstimate> {
    if alice.len() != bob.len() || mask.len() != alice.len() {
        return Err(Error::Dimension("alice, bob and mask lengths differ".into()));
    }
    let (x, y): (Vec<f64>, Vec<f64>) = alice
        .iter()
        .zip(bob)
        .zip(mask)
        .filter_map(|((a, b), m)| m.then_some((a / n0.sqrt(), b / n0.sqrt())))
        .unzip();
    let (slope, slope_se, resid, resid_se) = ols(&x, &y)?;
    let g = slope * slope;
    let g_se = 2.0 * slope.abs() * slope_se;
    let chi = resid / g - s;
    let chi_se = ((resid_se / g).powi(2) + (resid * g_se / (g * g)).powi(2)).sqrt();
    Ok(ChannelEstimate {
        g_hat: g,
        g_stderr: g_se,
        chi_hat: chi,
        chi_stderr: chi_se,
        eps_hat: chi - vacuum_noise(g),
        g_ci: (g - CI_SIGMAS * g_se, g + CI_SIGMAS * g_se),
        chi_ci: (chi - CI_SIGMAS * chi_se, chi + CI_SIGMAS * chi_se),
        sacrificed_fraction: x.len() as f64 / alice.len() as f64,
        sacrificed: x.len(),
        coarse: CI_SIGMAS * chi_se > CHI_CI_TARGET,
        slope,
        slope_stderr: slope_se,
        residual: resid,
        residual_stderr: resid_se,
        s,
    })
}

pub fn gray(b: u16) -> u16 {
    b ^ (b >> 1)
}

pub fn gray_inverse(mut g: u16) -> u16 {
    let mut b = g;
    while g > 0 {
        g >>= 1;
        b ^= g;
    }
    b
}

fn check_m(m: u32) -> Result<()> {
    if !(1..=MAX_SLICES).contains(&m) {
        return Err(Error::param(
            "m",
            format!("slice count must lie in [1, {MAX_SLICES}], got {m}"),
        ));
    }
    Ok(())
}

/// The `2^m − 1` empirical quantiles splitting `values` into equal bins.
pub fn quantile_boundaries(values: &[f64], m: u32) -> Result<Vec<f64>> {
    check_m(m)?;
    if values.is_empty() {
        return Err(Error::InsufficientSamples { needed: 1, have: 0 });
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let bins = 1usize << m;
    Ok((1..bins)
        .map(|k| sorted[(k * sorted.len() / bins).min(sorted.len() - 1)])
        .collect())
}

/// Gray-coded label of each value's bin.
pub fn slice(values: &[f64], m: u32, boundaries: &[f64]) -> Result<Vec<u16>> {
    check_m(m)?;
    if boundaries.len() != (1 << m) - 1 {
        return Err(Error::Dimension(format!(
            "{} boundaries for {} bins",
            boundaries.len(),
            1 << m
        )));
    }
    if boundaries.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(Error::param("boundaries", "must be non-decreasing"));
    }
    Ok(values
        .iter()
        .map(|v| gray(boundaries.partition_point(|b| b <= v) as u16))
        .collect())
}

fn bit(code: u16, k: u32) -> u8 {
    ((code >> k) & 1) as u8
}

/// Upper tail `P(Z > z)`.
fn upper_tail(z: f64) -> f64 {
    0.5 * libm::erfc(z / SQRT_2)
}

/// Probability of each bin under `N(mean, sigma²)`, accurate in both tails.
fn bin_masses(mean: f64, sigma: f64, boundaries: &[f64], out: &mut [f64]) {
    let k = boundaries.len() + 1;
    let edge = |j: usize| -> f64 {
        // P(X > edge j), edges indexed 0..=k with ±∞ at the ends.
        if j == 0 {
            1.0
        } else if j == k {
            0.0
        } else {
            upper_tail((boundaries[j - 1] - mean) / sigma)
        }
    };
    let lower = |j: usize| -> f64 {
        if j == 0 {
            0.0
        } else if j == k {
            1.0
        } else {
            upper_tail((mean - boundaries[j - 1]) / sigma)
        }
    };
    for (j, o) in out.iter_mut().enumerate().take(k) {
        // Use the representation that avoids subtracting numbers close to 1.
        let mid = if j == 0 || j + 1 == k {
            mean
        } else {
            0.5 * (boundaries[j - 1] + boundaries[j])
        };
        *o = if mid >= mean {
            edge(j) - edge(j + 1)
        } else {
            lower(j + 1) - lower(j)
        };
    }
}

/// Most probable value of bit `k` of the reference label, given the
/// reference's higher bits `known`.
fn map_bit(masses: &[f64], k: u32, known: u16, mean: f64, boundaries: &[f64]) -> u8 {
    let mask = (masses.len() as u16 - 1) & !((2u16 << k) - 1);
    let mut weight = [0.0f64; 2];
    let mut nearest = (f64::INFINITY, 0u8);
    for (j, &mass) in masses.iter().enumerate() {
        let label = gray(j as u16);
        if label & mask != known & mask {
            continue;
        }
        let b = bit(label, k);
        weight[b as usize] += mass;
        let lo = if j == 0 { f64::NEG_INFINITY } else { boundaries[j - 1] };
        let hi = if j == boundaries.len() {
            f64::INFINITY
        } else {
            boundaries[j]
        };
        let dist = if mean < lo {
            lo - mean
        } else if mean > hi {
            mean - hi
        } else {
            0.0
        };
        if dist < nearest.0 {
            nearest = (dist, b);
        }
    }
    if weight[0] == 0.0 && weight[1] == 0.0 {
        nearest.1
    } else {
        u8::from(weight[1] > weight[0])
    }
}

pub fn binary_entropy(p: f64) -> f64 {
    if p <= 0.0 || p >= 1.0 {
        0.0
    } else {
        -p * p.log2() - (1.0 - p) * (1.0 - p).log2()
    }
}

fn digest(bits: &[u8], seed: u64, slice: u32, round: u32) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(slice.to_le_bytes());
    h.update(round.to_le_bytes());
    h.update(pack(bits));
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("8 bytes"))
}

/// Bits packed MSB-first into bytes.
pub fn pack(bits: &[u8]) -> Vec<u8> {
    bits.chunks(8)
        .map(|c| c.iter().enumerate().fold(0u8, |acc, (i, b)| acc | (b << (7 - i))))
        .collect()
}

/// Two-party parity exchange on one slice, run in one process.
struct Cascade<'a> {
    reference: &'a [u8],
    other: &'a mut [u8],
    ref_party: Party,
    slice: u32,
    seed: u64,
    /// Per pass: permutation, inverse permutation, block size, and the
    /// reference and other block parities.
    perms: Vec<Vec<u32>>,
    inv: Vec<Vec<u32>>,
    sizes: Vec<usize>,
    ref_par: Vec<Vec<u8>>,
    oth_par: Vec<Vec<u8>>,
    log: &'a mut Vec<Message>,
}

impl Cascade<'_> {
    fn other_party(&self) -> Party {
        match self.ref_party {
            Party::Alice => Party::Bob,
            Party::Bob => Party::Alice,
        }
    }

    /// Both parties announce the parity of the same index set; returns
    /// whether they differ.
    fn exchange(&mut self, round: u32, indices: &[u32]) -> bool {
        let rp = indices.iter().fold(0u8, |a, &i| a ^ self.reference[i as usize]);
        let op = indices.iter().fold(0u8, |a, &i| a ^ self.other[i as usize]);
        for (party, parity) in [(self.other_party(), op), (self.ref_party, rp)] {
            self.log.push(Message::Parity {
                round,
                direction: Transfer::from(party),
                slice: self.slice,
                block_indices: indices.to_vec(),
                parity_bit: parity,
            });
        }
        rp != op
    }

    fn block_range(&self, pass: usize, b: usize) -> (usize, usize) {
        let n = self.reference.len();
        let k = self.sizes[pass];
        (b * k, ((b + 1) * k).min(n))
    }

    /// Bisects a block whose parities are known to differ, flips the located
    /// bit, and returns its index.
    fn bisect(&mut self, pass: usize, b: usize) -> usize {
        let (mut lo, mut hi) = self.block_range(pass, b);
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            let left: Vec<u32> = self.perms[pass][lo..mid].to_vec();
            if self.exchange(pass as u32 + 1, &left) {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let pos = self.perms[pass][lo] as usize;
        self.other[pos] ^= 1;
        pos
    }

    /// Flips propagate to every earlier pass; blocks that become odd are
    /// bisected in turn.
    fn resolve(&mut self, mut queue: Vec<(usize, usize)>, upto: usize) {
        while let Some((pass, b)) = queue.pop() {
            if self.ref_par[pass][b] == self.oth_par[pass][b] {
                continue;
            }
            let pos = self.bisect(pass, b);
            for p in 0..=upto {
                let blk = self.inv[p][pos] as usize / self.sizes[p];
                self.oth_par[p][blk] ^= 1;
                if self.ref_par[p][blk] != self.oth_par[p][blk] {
                    queue.push((p, blk));
                }
            }
        }
    }

    fn run_pass(&mut self, pass: usize, size: usize) {
        let n = self.reference.len();
        let mut perm: Vec<u32> = (0..n as u32).collect();
        let mut coin = rng::substream(
            rng::derive_seed(self.seed, tag::PUBLIC_COIN),
            ((self.slice as u64) << 32) | pass as u64,
        );
        perm.shuffle(&mut coin);
        let mut inv = vec![0u32; n];
        for (i, &p) in perm.iter().enumerate() {
            inv[p as usize] = i as u32;
        }
        self.perms.push(perm);
        self.inv.push(inv);
        // A single block hides every even error pattern, so keep at least two.
        self.sizes.push(size.clamp(1, n.div_ceil(2).max(1)));
        let blocks = n.div_ceil(self.sizes[pass]);
        self.ref_par.push(vec![0; blocks]);
        self.oth_par.push(vec![0; blocks]);
        let mut queue = Vec::new();
        for b in 0..blocks {
            let (lo, hi) = self.block_range(pass, b);
            let idx: Vec<u32> = self.perms[pass][lo..hi].to_vec();
            let differ = self.exchange(pass as u32 + 1, &idx);
            self.ref_par[pass][b] = idx.iter().fold(0, |a, &i| a ^ self.reference[i as usize]);
            self.oth_par[pass][b] = idx.iter().fold(0, |a, &i| a ^ self.other[i as usize]);
            if differ {
                queue.push((pass, b));
            }
        }
        self.resolve(queue, pass);
    }

    /// The reference publishes a digest, the other party answers whether it
    /// matches hers.
    fn verify(&mut self, round: u32) -> bool {
        let d = digest(self.reference, self.seed, self.slice, round);
        let accepted = d == digest(self.other, self.seed, self.slice, round);
        self.log.push(Message::Digest {
            round,
            direction: Transfer::from(self.ref_party),
            slice: self.slice,
            digest: d,
        });
        self.log.push(Message::Verdict {
            round,
            direction: Transfer::from(self.other_party()),
            slice: self.slice,
            accepted,
        });
        accepted
    }
}

/// Initial Cascade block size `0.73/p`.
fn initial_block(p: f64, n: usize) -> usize {
    ((0.73 / p).round() as usize).clamp(2, n.max(2))
}

/// Corrects `other` toward `reference` on one slice. An error-free estimate
/// triggers a digest comparison first, so identical slices disclose only the
/// digest. Returns whether the final digests agree.
#[allow(clippy::too_many_arguments)]
pub fn cascade_slice(
    reference: &[u8],
    other: &mut [u8],
    ref_party: Party,
    error_rate: f64,
    max_passes: usize,
    slice: u32,
    seed: u64,
    log: &mut Vec<Message>,
) -> Result<bool> {
    if reference.len() != other.len() {
        return Err(Error::Dimension("slices have different lengths".into()));
    }
    if reference.is_empty() {
        return Ok(true);
    }
    let mut c = Cascade {
        reference,
        other,
        ref_party,
        slice,
        seed,
        perms: Vec::new(),
        inv: Vec::new(),
        sizes: Vec::new(),
        ref_par: Vec::new(),
        oth_par: Vec::new(),
        log,
    };
    if error_rate <= 0.0 && c.verify(0) {
        return Ok(true);
    }
    let n = reference.len();
    let p = error_rate.max(1.0 / n as f64);
    let k1 = initial_block(p, n);
    for pass in 0..max_passes {
        let size = k1.saturating_mul(1usize << pass.min(40));
        c.run_pass(pass, size);
        if pass + 1 >= MIN_PASSES && c.verify(pass as u32 + 1) {
            return Ok(true);
        }
    }
    Ok(false)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Correction {
    /// The non-reference party's codewords after correction.
    pub corrected: Vec<u16>,
    pub disclosed_bits: u64,
    pub log: Vec<Message>,
    pub verified: bool,
}

/// Slice-by-slice Cascade on hard codewords. `error_rate` is the public
/// per-slice estimate used to size the first pass.
pub fn correct(
    direction: Direction,
    alice_codes: &[u16],
    bob_codes: &[u16],
    m: u32,
    max_passes: usize,
    error_rate: f64,
    seed: u64,
) -> Result<Correction> {
    check_m(m)?;
    if alice_codes.len() != bob_codes.len() {
        return Err(Error::Dimension("code vectors have different lengths".into()));
    }
    let (reference, other) = match direction {
        Direction::Reverse => (bob_codes, alice_codes),
        Direction::Direct => (alice_codes, bob_codes),
    };
    let mut corrected = other.to_vec();
    let mut log = Vec::new();
    let mut verified = true;
    for k in 0..m {
        let r: Vec<u8> = reference.iter().map(|c| bit(*c, k)).collect();
        let mut o: Vec<u8> = corrected.iter().map(|c| bit(*c, k)).collect();
        verified &= cascade_slice(
            &r,
            &mut o,
            direction.reference(),
            error_rate,
            max_passes,
            k,
            seed,
            &mut log,
        )?;
        for (c, b) in corrected.iter_mut().zip(&o) {
            *c = (*c & !(1 << k)) | ((*b as u16) << k);
        }
    }
    if !verified {
        return Err(Error::Unsupported(
            "residual mismatch after the last Cascade pass; abort".into(),
        ));
    }
    Ok(Correction {
        corrected,
        disclosed_bits: log.iter().map(Message::leaked_bits).sum(),
        log,
        verified,
    })
}

/// Toeplitz hashing over GF(2): output bit `i` is the parity of
/// `t[i−j+L−1]·x[j]` over `j`, with the `out+L−1` bits `t` drawn from the
/// public coin.
pub fn toeplitz_hash(bits: &[u8], out_len: usize, seed: u64) -> Vec<u8> {
    let l = bits.len();
    if out_len == 0 || l == 0 {
        return Vec::new();
    }
    let t_len = out_len + l - 1;
    let mut coin = rng::substream(rng::derive_seed(seed, tag::PUBLIC_COIN), u64::MAX - 1);
    let t_words: Vec<u64> = (0..t_len.div_ceil(64) + 1).map(|_| coin.random()).collect();
    // Reversing x turns each row into a contiguous window of t.
    let words = l.div_ceil(64);
    let mut y = vec![0u64; words];
    for (jr, &b) in bits.iter().rev().enumerate() {
        y[jr / 64] |= (b as u64) << (jr % 64);
    }
    let tail_mask = if l.is_multiple_of(64) {
        u64::MAX
    } else {
        (1u64 << (l % 64)) - 1
    };
    (0..out_len)
        .map(|i| {
            let (q, r) = (i / 64, i % 64);
            let mut acc = 0u64;
            for w in 0..words {
                let lo = t_words[q + w] >> r;
                let hi = if r == 0 { 0 } else { t_words[q + w + 1] << (64 - r) };
                let mut win = lo | hi;
                if w + 1 == words {
                    win &= tail_mask;
                }
                acc ^= win & y[w];
            }
            (acc.count_ones() & 1) as u8
        })
        .collect()
}

/// Bit `j` of the public Toeplitz coin, for reference implementations.
pub fn toeplitz_coin_bit(seed: u64, j: usize) -> u8 {
    let mut coin = rng::substream(rng::derive_seed(seed, tag::PUBLIC_COIN), u64::MAX - 1);
    let words: Vec<u64> = (0..=j / 64).map(|_| coin.random()).collect();
    ((words[j / 64] >> (j % 64)) & 1) as u8
}

/// Compresses a reconciled key to `input_entropy − eve_info − margin` bits.
pub fn privacy_amplify(
    bits: &[u8],
    input_entropy: f64,
    eve_info_bits: f64,
    margin_bits: u64,
    seed: u64,
) -> Result<Vec<u8>> {
    let target = (input_entropy - eve_info_bits - margin_bits as f64).floor();
    if !(target >= 1.0) {
        return Err(Error::Unsupported(format!(
            "no secret key: entropy {input_entropy:.1} does not exceed Eve's {eve_info_bits:.1} bits plus a {margin_bits}-bit margin"
        )));
    }
    let out = (target as usize).min(bits.len());
    Ok(toeplitz_hash(bits, out, seed))
}

/// Eve's information on Alice's key element in direct reconciliation:
/// `½·log2((V+μ)/((V+χ)/(Vχ+1) + μ))` with `μ = (sV−1)/(V−s)` the noise of
/// Alice's joint measurement.
pub fn eve_info_direct(chi: f64, v: f64, s: f64) -> Result<f64> {
    if !(v > 1.0) {
        return Ok(0.0);
    }
    if !(chi >= 0.0) {
        return Err(Error::param(
            "chi",
            format!("added noise must be non-negative, got {chi}"),
        ));
    }
    let mu = if s >= v {
        f64::INFINITY
    } else {
        ((s * v - 1.0) / (v - s)).max(0.0)
    };
    if mu.is_infinite() {
        return Ok(0.0);
    }
    let eve_min = (v + chi) / (v * chi + 1.0) + mu;
    Ok((0.5 * ((v + mu) / eve_min).log2()).max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub direction: Direction,
    pub m: u32,
    pub sacrificed_fraction: f64,
    pub margin_bits: u64,
    pub max_passes: usize,
    pub seed: u64,
    /// Size privacy amplification from a characterized `(G, χ)` instead of
    /// the upper confidence limit of the estimate.
    pub known_channel: Option<(f64, f64)>,
}

impl DistillConfig {
    pub fn new(direction: Direction, seed: u64) -> Self {
        Self {
            direction,
            m: DEFAULT_SLICES,
            sacrificed_fraction: DEFAULT_SACRIFICE,
            margin_bits: DEFAULT_MARGIN_BITS,
            max_passes: DEFAULT_MAX_PASSES,
            seed,
            known_channel: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum AbortReason {
    /// Direct reconciliation with `χ ≥ 1` (at the upper confidence limit).
    DirectReconciliationInsecure,
    /// Disclosure plus Eve's information leaves nothing after the margin.
    NoSecretKey,
    /// A slice still differed after the last Cascade pass.
    CorrectionFailed { slice: u32 },
    /// The amplified keys hash differently.
    KeyMismatch,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Outcome {
    Success,
    Aborted(AbortReason),
}

/// Per-slice bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SliceReport {
    pub slice: u32,
    pub estimated_error_rate: f64,
    /// Bits where the other party's first decoding differed from the reference.
    pub raw_errors: usize,
    pub disclosed_bits: u64,
    pub fully_disclosed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeySession {
    pub direction: Direction,
    pub m: u32,
    /// Key symbols after removing the sacrificed ones.
    pub n: usize,
    pub alice_values: Vec<f64>,
    pub bob_values: Vec<f64>,
    pub boundaries: Vec<f64>,
    pub reference_codes: Vec<u16>,
    /// The other party's codewords after correction.
    pub corrected_codes: Vec<u16>,
    pub estimate: ChannelEstimate,
    pub slices: Vec<SliceReport>,
    pub disclosed_bits: u64,
    /// Plug-in entropy of the reference codewords, bits per symbol.
    pub codeword_entropy: f64,
    /// Mutual information at the estimated channel, bits per symbol.
    pub i_ba: f64,
    /// Eve's information at the channel estimate, or at the characterized
    /// channel when one is given, bits per symbol.
    pub eve_info_estimate: f64,
    /// Eve's information charged by privacy amplification: the upper
    /// confidence limit, or the value at a characterized channel.
    pub eve_info: f64,
    pub beta_achieved: f64,
    pub final_key_a: Vec<u8>,
    pub final_key_b: Vec<u8>,
    pub log: Vec<Message>,
    pub outcome: Outcome,
}

impl KeySession {
    pub fn key_hash(key: &[u8]) -> [u8; 32] {
        Sha256::digest(pack(key)).into()
    }

    pub fn succeeded(&self) -> bool {
        self.outcome == Outcome::Success
    }
}

/// Squeezing on the key symbols, as known to Alice.
fn key_squeezing(cfg: &RunConfig) -> f64 {
    match cfg.prep.mode {
        PreparationMode::Joint { .. } => cfg.prep.squeezing().expect("joint mode"),
        PreparationMode::SingleQuadrature { .. } => 1.0 / cfg.prep.v,
    }
}

/// Estimate, slice, correct and amplify the key elements of one run.
pub fn distill(run_cfg: &RunConfig, key: &KeyElements, cfg: &DistillConfig) -> Result<KeySession> {
    check_m(cfg.m)?;
    let n0 = run_cfg.prep.n0.value();
    let v = run_cfg.prep.v;
    let s = key_squeezing(run_cfg);
    let mask = sacrifice_mask(key.len(), cfg.sacrificed_fraction, cfg.seed)?;
    let estimate = estimate_channel(&key.alice, &key.bob, &mask, s, n0)?;

    let split = |vals: &[f64], keep: bool| -> Vec<f64> {
        vals.iter()
            .zip(&mask)
            .filter_map(|(x, m)| (*m != keep).then_some(*x))
            .collect()
    };
    let (alice_keep, bob_keep) = (split(&key.alice, true), split(&key.bob, true));
    let (alice_sac, bob_sac) = (split(&key.alice, false), split(&key.bob, false));
    let (ref_keep, oth_keep, ref_sac, oth_sac) = match cfg.direction {
        Direction::Reverse => (&bob_keep, &alice_keep, &bob_sac, &alice_sac),
        Direction::Direct => (&alice_keep, &bob_keep, &alice_sac, &bob_sac),
    };
    let n = ref_keep.len();

    let chi_up = estimate.chi_ci.1.max(0.0);
    let (eve_info_estimate, eve_info) = match cfg.known_channel {
        Some((g, chi)) => {
            let known = match cfg.direction {
                Direction::Reverse => security::mutual_info_be_rr(g, chi, v)?.max(0.0),
                Direction::Direct => eve_info_direct(chi, v, s)?,
            };
            (known, known)
        }
        None => estimate.eve_information(cfg.direction, v)?,
    };
    let chi_mid = estimate.chi_hat.max(0.0);
    let i_ba = security::mutual_info_ba(estimate.g_hat, chi_mid, v, s)?;

    let boundaries = quantile_boundaries(ref_sac, cfg.m)?;
    let reference_codes = slice(ref_keep, cfg.m, &boundaries)?;
    let ref_sac_codes = slice(ref_sac, cfg.m, &boundaries)?;
    let codeword_entropy = {
        let mut counts = vec![0usize; 1 << cfg.m];
        for c in &reference_codes {
            counts[*c as usize] += 1;
        }
        counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / n as f64;
                -p * p.log2()
            })
            .sum::<f64>()
    };

    let mut session = KeySession {
        direction: cfg.direction,
        m: cfg.m,
        n,
        alice_values: alice_keep.clone(),
        bob_values: bob_keep.clone(),
        boundaries: boundaries.clone(),
        reference_codes: reference_codes.clone(),
        corrected_codes: vec![0; n],
        estimate,
        slices: Vec::new(),
        disclosed_bits: 0,
        codeword_entropy,
        i_ba,
        eve_info_estimate,
        eve_info,
        beta_achieved: 0.0,
        final_key_a: Vec::new(),
        final_key_b: Vec::new(),
        log: Vec::new(),
        outcome: Outcome::Success,
    };

    if cfg.direction == Direction::Direct && chi_up >= 1.0 {
        session.outcome = Outcome::Aborted(AbortReason::DirectReconciliationInsecure);
        return Ok(session);
    }

    // The other party predicts the reference value by regression on the
    // sacrificed symbols, with the residual spread as the decoding width.
    let (slope, _, resid, _) = ols(oth_sac, ref_sac)?;
    let sigma = resid.sqrt().max(f64::MIN_POSITIVE);
    let bins = 1usize << cfg.m;
    let masses = |vals: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; vals.len() * bins];
        for (x, row) in vals.iter().zip(out.chunks_exact_mut(bins)) {
            bin_masses(slope * x, sigma, &boundaries, row);
        }
        out
    };
    let sac_masses = masses(oth_sac);
    let key_masses = masses(oth_keep);

    let mut corrected = vec![0u16; n];
    let mut key_slices: Vec<Vec<u8>> = Vec::new();
    for k in (0..cfg.m).rev() {
        let sac_errors = ref_sac_codes
            .iter()
            .zip(sac_masses.chunks_exact(bins))
            .zip(oth_sac)
            .filter(|((c, row), x)| map_bit(row, k, **c, slope * **x, &boundaries) != bit(**c, k))
            .count();
        let p = sac_errors as f64 / ref_sac_codes.len() as f64;

        let reference: Vec<u8> = reference_codes.iter().map(|c| bit(*c, k)).collect();
        let mut other: Vec<u8> = corrected
            .iter()
            .zip(key_masses.chunks_exact(bins))
            .zip(oth_keep)
            .map(|((c, row), x)| map_bit(row, k, *c, slope * x, &boundaries))
            .collect();
        let raw_errors = reference.iter().zip(&other).filter(|(a, b)| a != b).count();
        let before = session.log.len();
        let fully_disclosed = CASCADE_LEAK_FACTOR * binary_entropy(p) >= 1.0;
        if fully_disclosed {
            for (i, &b) in reference.iter().enumerate() {
                session.log.push(Message::Parity {
                    round: 0,
                    direction: Transfer::from(cfg.direction.reference()),
                    slice: k,
                    block_indices: vec![i as u32],
                    parity_bit: b,
                });
            }
            other.copy_from_slice(&reference);
        } else {
            let ok = cascade_slice(
                &reference,
                &mut other,
                cfg.direction.reference(),
                p,
                cfg.max_passes,
                k,
                cfg.seed,
                &mut session.log,
            )?;
            if !ok {
                session.outcome = Outcome::Aborted(AbortReason::CorrectionFailed { slice: k });
            }
        }
        let disclosed: u64 = session.log[before..].iter().map(Message::leaked_bits).sum();
        session.slices.push(SliceReport {
            slice: k,
            estimated_error_rate: p,
            raw_errors,
            disclosed_bits: disclosed,
            fully_disclosed,
        });
        for (c, b) in corrected.iter_mut().zip(&other) {
            *c |= (*b as u16) << k;
        }
        if !fully_disclosed {
            key_slices.push(other);
        }
        if session.outcome != Outcome::Success {
            break;
        }
    }
    session.corrected_codes = corrected;
    session.disclosed_bits = session.log.iter().map(Message::leaked_bits).sum();
    let useful = n as f64 * codeword_entropy - session.disclosed_bits as f64;
    session.beta_achieved = if i_ba > 0.0 { useful / (n as f64 * i_ba) } else { 0.0 };
    if session.outcome != Outcome::Success {
        return Ok(session);
    }

    // Both parties hash their own copy; the other party's copy is the
    // corrected one.
    let ref_bits: Vec<u8> = session
        .slices
        .iter()
        .filter(|r| !r.fully_disclosed)
        .flat_map(|r| reference_codes.iter().map(move |c| bit(*c, r.slice)))
        .collect();
    let oth_bits: Vec<u8> = key_slices.concat();
    let eve_bits = n as f64 * eve_info + session.disclosed_bits as f64;
    let entropy = n as f64 * codeword_entropy;
    let ref_key = match privacy_amplify(&ref_bits, entropy, eve_bits, cfg.margin_bits, cfg.seed) {
        Ok(k) => k,
        Err(_) => {
            session.outcome = Outcome::Aborted(AbortReason::NoSecretKey);
            return Ok(session);
        }
    };
    let oth_key = privacy_amplify(&oth_bits, entropy, eve_bits, cfg.margin_bits, cfg.seed)?;
    let (a, b) = match cfg.direction {
        Direction::Reverse => (oth_key, ref_key),
        Direction::Direct => (ref_key, oth_key),
    };
    if KeySession::key_hash(&a) != KeySession::key_hash(&b) {
        session.outcome = Outcome::Aborted(AbortReason::KeyMismatch);
        return Ok(session);
    }
    session.final_key_a = a;
    session.final_key_b = b;
    Ok(session)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::ChannelModel;
    use crate::harness::{run, RunConfig};
    use crate::preparation::PreparationConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn session_cfg(g: f64, eps: f64, v: f64, n: usize, seed: u64) -> RunConfig {
        RunConfig::new(
            PreparationConfig::coherent(v),
            ChannelModel::from_excess(g, eps).unwrap(),
            n,
            seed,
        )
    }

    #[test]
    fn gray_code_round_trip() {
        for b in 0..256u16 {
            assert_eq!(gray_inverse(gray(b)), b);
            assert_eq!((gray(b) ^ gray(b + 1)).count_ones(), 1);
        }
    }

    #[test]
    fn median_slice_is_balanced() {
        let r = run(&session_cfg(0.5, 0.0, 10.0, 20_000, 1)).unwrap();
        let b = quantile_boundaries(&r.key.bob, 1).unwrap();
        let codes = slice(&r.key.bob, 1, &b).unwrap();
        let ones = codes.iter().filter(|c| **c == 1).count() as f64;
        assert!((ones - 10_000.0).abs() <= 3.0 * (20_000.0f64 * 0.25).sqrt() + 1.0);
    }

    #[test]
    fn octile_labels_are_uniform() {
        let mut coin = ChaCha8Rng::seed_from_u64(3);
        let vals: Vec<f64> = (0..80_000).map(|_| coin.sample(rand_distr::StandardNormal)).collect();
        let normal_octiles: Vec<f64> = (1..8)
            .map(|k| {
                // Bisection on the normal CDF.
                let target = k as f64 / 8.0;
                let (mut lo, mut hi) = (-10.0, 10.0);
                for _ in 0..100 {
                    let mid = 0.5 * (lo + hi);
                    if 1.0 - upper_tail(mid) < target {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                0.5 * (lo + hi)
            })
            .collect();
        let codes = slice(&vals, 3, &normal_octiles).unwrap();
        for label in 0..8u16 {
            let f = codes.iter().filter(|c| **c == label).count() as f64;
            let se = (80_000.0f64 * (1.0 / 8.0) * (7.0 / 8.0)).sqrt();
            assert!((f - 10_000.0).abs() < 5.0 * se, "label {label}: {f}");
        }
    }

    #[test]
    fn identical_values_give_identical_codes() {
        let vals = [-1.0, 0.3, 2.2, 0.0];
        let other = vals;
        let b = quantile_boundaries(&vals, 2).unwrap();
        assert_eq!(slice(&vals, 2, &b).unwrap(), slice(&other, 2, &b).unwrap());
        assert!(slice(&vals, 9, &b).is_err());
        assert!(slice(&vals, 2, &[1.0, 0.0, 2.0]).is_err());
    }

    #[test]
    fn bin_masses_sum_to_one() {
        let b = [-1.0, -0.2, 0.0, 0.4, 1.0, 2.0, 3.0];
        let mut out = [0.0; 8];
        for mean in [-50.0, -1.0, 0.1, 2.5, 60.0] {
            bin_masses(mean, 0.7, &b, &mut out);
            assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(out.iter().all(|m| *m >= 0.0));
        }
    }

    #[test]
    fn identical_inputs_disclose_only_the_digest() {
        let codes: Vec<u16> = (0..1000).map(|i| (i % 16) as u16).collect();
        let c = correct(Direction::Reverse, &codes, &codes, 4, 8, 0.0, 1).unwrap();
        assert_eq!(c.corrected, codes);
        assert_eq!(c.disclosed_bits, 4 * (DIGEST_BITS + 1));
        assert!(c.log.iter().all(|m| !matches!(m, Message::Parity { .. })));
    }

    #[test]
    fn one_percent_flips_are_corrected() {
        let n = 10_000;
        let mut coin = ChaCha8Rng::seed_from_u64(11);
        let bob: Vec<u16> = (0..n).map(|_| coin.random_range(0..16)).collect();
        let alice: Vec<u16> = bob
            .iter()
            .map(|c| if coin.random_bool(0.01) { c ^ 1 } else { *c })
            .collect();
        let c = correct(Direction::Reverse, &alice, &bob, 4, DEFAULT_MAX_PASSES, 0.01, 5).unwrap();
        assert_eq!(c.corrected, bob);
        let bound = 2.0 * n as f64 * binary_entropy(0.01);
        let from_reference = c
            .log
            .iter()
            .filter(|m| {
                matches!(
                    m,
                    Message::Parity {
                        slice: 0,
                        direction: Transfer::BobToAlice,
                        ..
                    }
                )
            })
            .count() as f64;
        assert!(from_reference <= bound, "{from_reference} > {bound}");
    }

    #[test]
    fn direction_contract() {
        let mut coin = ChaCha8Rng::seed_from_u64(2);
        let alice: Vec<u16> = (0..2000).map(|_| coin.random_range(0..4)).collect();
        let bob: Vec<u16> = alice
            .iter()
            .map(|c| if coin.random_bool(0.03) { c ^ 1 } else { *c })
            .collect();
        let rr = correct(Direction::Reverse, &alice, &bob, 2, DEFAULT_MAX_PASSES, 0.03, 1).unwrap();
        assert_eq!(rr.corrected, bob);
        let dr = correct(Direction::Direct, &alice, &bob, 2, DEFAULT_MAX_PASSES, 0.03, 1).unwrap();
        assert_eq!(dr.corrected, alice);
    }

    #[test]
    fn toeplitz_matches_naive_product() {
        let mut coin = ChaCha8Rng::seed_from_u64(4);
        for (l, out) in [(1, 1), (70, 13), (200, 64), (129, 100)] {
            let bits: Vec<u8> = (0..l).map(|_| coin.random_range(0..2)).collect();
            let fast = toeplitz_hash(&bits, out, 9);
            let t: Vec<u8> = (0..out + l - 1).map(|j| toeplitz_coin_bit(9, j)).collect();
            let naive: Vec<u8> = (0..out)
                .map(|i| (0..l).fold(0u8, |acc, j| acc ^ (t[i + l - 1 - j] & bits[j])))
                .collect();
            assert_eq!(fast, naive, "l={l} out={out}");
        }
    }

    #[test]
    fn privacy_amplification_contract() {
        let bits = vec![1u8; 1000];
        assert!(privacy_amplify(&bits, 1000.0, 1000.0, 64, 1).is_err());
        let a = privacy_amplify(&bits, 1000.0, 100.0, 64, 1).unwrap();
        assert_eq!(a.len(), 836);
        assert_eq!(a, privacy_amplify(&bits, 1000.0, 100.0, 64, 1).unwrap());
    }

    #[test]
    fn channel_estimate_examples() {
        let r = run(&session_cfg(0.5, 0.0, 10.0, 100_000, 21)).unwrap();
        let mask = sacrifice_mask(r.key.len(), 0.1, 21).unwrap();
        let e = estimate_channel(&r.key.alice, &r.key.bob, &mask, 1.0, 1.0).unwrap();
        assert!((e.g_hat - 0.5).abs() < 3.0 * e.g_stderr, "{e:?}");
        assert_eq!(e.sacrificed, 10_000);

        let r = run(&session_cfg(1.0, 0.0, 10.0, 100_000, 22)).unwrap();
        let e = estimate_channel(&r.key.alice, &r.key.bob, &mask, 1.0, 1.0).unwrap();
        assert!((e.g_hat - 1.0).abs() < 3.0 * e.g_stderr);
        assert!(e.chi_hat.abs() < 3.0 * e.chi_stderr);

        let r = run(&session_cfg(0.5, 0.3, 10.0, 100_000, 23)).unwrap();
        let e = estimate_channel(&r.key.alice, &r.key.bob, &mask, 1.0, 1.0).unwrap();
        assert!(
            (e.chi_hat - vacuum_noise(e.g_hat) - 0.3).abs() < 3.0 * e.chi_stderr,
            "{e:?}"
        );
        assert!(sacrifice_mask(10, 0.0, 1).is_err());
        assert!(sacrifice_mask(10, 0.6, 1).is_err());
    }

    #[test]
    fn direct_eve_information() {
        // Coherent states: ½·log2((Vχ+1)/(1+χ)).
        for (chi, v) in [(0.5f64, 10.0f64), (0.9, 4.0)] {
            let expected = 0.5 * ((v * chi + 1.0) / (1.0 + chi)).log2();
            assert!((eve_info_direct(chi, v, 1.0).unwrap() - expected).abs() < 1e-12);
            let iab = security::mutual_info_ba(0.6, chi, v, 1.0).unwrap();
            assert!(iab > eve_info_direct(chi, v, 1.0).unwrap());
        }
        let iab = security::mutual_info_ba(0.3, 1.5, 10.0, 1.0).unwrap();
        assert!(iab < eve_info_direct(1.5, 10.0, 1.0).unwrap());
    }

    #[test]
    fn distill_lossless_session_agrees() {
        let cfg = session_cfg(1.0, 0.0, 1e4, 20_000, 31);
        let r = run(&cfg).unwrap();
        let mut d = DistillConfig::new(Direction::Reverse, 31);
        d.known_channel = Some((1.0, 0.0));
        let s = distill(&cfg, &r.key, &d).unwrap();
        assert!(s.succeeded(), "{:?}", s.outcome);
        assert!(!s.final_key_a.is_empty());
        assert_eq!(s.final_key_a, s.final_key_b);
        assert_eq!(s.reference_codes, s.corrected_codes);
        assert_eq!(
            s.bob_values,
            r.key
                .bob
                .iter()
                .zip(sacrifice_mask(r.key.len(), 0.1, 31).unwrap())
                .filter(|(_, m)| !m)
                .map(|(b, _)| *b)
                .collect::<Vec<_>>()
        );
        let charged =
            s.final_key_a.len() as f64 + s.n as f64 * s.eve_info + s.disclosed_bits as f64 + d.margin_bits as f64;
        assert!(charged <= s.n as f64 * s.codeword_entropy + 1.0);
    }

    #[test]
    fn distill_direct_below_half_aborts() {
        let cfg = session_cfg(0.25, 0.0, 10.0, 20_000, 32);
        let r = run(&cfg).unwrap();
        let s = distill(&cfg, &r.key, &DistillConfig::new(Direction::Direct, 32)).unwrap();
        assert_eq!(s.outcome, Outcome::Aborted(AbortReason::DirectReconciliationInsecure));
    }

    #[test]
    fn distill_is_deterministic() {
        let cfg = session_cfg(0.8, 0.05, 6.0, 20_000, 33);
        let r = run(&cfg).unwrap();
        let d = DistillConfig::new(Direction::Reverse, 33);
        assert_eq!(distill(&cfg, &r.key, &d).unwrap(), distill(&cfg, &r.key, &d).unwrap());
    }
}
