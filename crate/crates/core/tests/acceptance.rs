//! Runs every acceptance criterion, prints one PASS/FAIL line each and fails
//! if any criterion fails. Oracles here are written independently of the
//! library's closed forms wherever a second route exists.

use cvqkd_core::channel::{alice_conditional_variance, eve_conditional_variance_bound, vacuum_noise, ChannelModel};
use cvqkd_core::harness::{black_box_equivalence, grid, run, sweep, Attack, RunConfig, Z_GATE};
use cvqkd_core::preparation::PreparationConfig;
use cvqkd_core::reconciliation::{distill, AbortReason, Direction, DistillConfig, Outcome};
use cvqkd_core::security;
use cvqkd_core::ShotNoise;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

type Criterion = (&'static str, fn() -> Verdict);

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

/// Two significant figures, as printed in scientific notation.
fn sig2(x: f64) -> String {
    format!("{x:.1e}")
}

fn headline_numbers() -> Verdict {
    let (g, v) = (0.01, 10.0);
    let chi = vacuum_noise(g);
    let i_ba = security::mutual_info_ba(g, chi, v, 1.0).unwrap();
    let d = security::delta_i_rr(g, chi, v, 1.0).unwrap();
    // Coherent states: I_BA = ½log2((V+χ)/(1+χ)).
    let oracle = 0.5 * ((v + chi) / (1.0 + chi)).log2();
    let pass = sig2(i_ba) == "6.2e-2" && sig2(d) == "6.5e-3" && (i_ba - oracle).abs() < 1e-15;
    verdict(pass, format!("I_BA = {i_ba:.4e}, dI = {d:.4e}"))
}

fn bb84_comparison() -> Verdict {
    let one = security::bb84_compare(0.01, 1.0).unwrap().rate;
    let tenth = security::bb84_compare(0.01, 0.1).unwrap().rate;
    let pass = sig2(one) == "5.0e-3" && (one / tenth - 10.0).abs() < 1e-12;
    verdict(
        pass,
        format!("n=1: {one:.3e}, n=0.1: {tenth:.3e}, ratio {:.12}", one / tenth),
    )
}

/// `(x + G)(x + G/V) = 1` with `x = Gχ`, solved by the plain quadratic formula.
fn coherent_threshold_oracle(g: f64, v: f64) -> f64 {
    let (b, c) = (g + g / v, g * g / v - 1.0);
    let x = 0.5 * (-b + (b * b - 4.0 * c).sqrt());
    x / g - (1.0 - g) / g
}

fn figure_curves() -> Verdict {
    let v = 1e6;
    let tol = 1e-6;
    let crossover = security::dr_coherent_crossover_gain(v).unwrap();
    let mut worst = 0.0_f64;
    let mut shape_ok = true;
    for i in 0..20 {
        let loss = 40.0 * i as f64 / 19.0;
        let p = security::curve_point(loss, v).unwrap();
        let g = 10f64.powf(-loss / 10.0);
        worst = worst
            .max((p.g - g).abs())
            .max((p.eps_max_dr - (2.0 - 1.0 / g)).abs() * g)
            .max((p.eps_max_rr_coh - coherent_threshold_oracle(g, v)).abs())
            .max((p.eps_max_rr_epr - (1.0 - 1.0 / v)).abs())
            .max((p.eps_entanglement - 2.0).abs());
        // DR is above the coherent curve before the crossover and below after.
        if (g > crossover) != (p.eps_max_dr > p.eps_max_rr_coh) {
            shape_ok = false;
        }
    }
    let dr_zero = security::dr_threshold(security::loss_db_to_gain(3.0103)).unwrap();
    let far = security::curve_point(40.0, v).unwrap();
    shape_ok &=
        dr_zero.abs() < 1e-5 && (far.eps_max_rr_epr - 1.0).abs() < 1e-5 && (far.eps_max_rr_coh - 0.5).abs() < 1e-4;
    verdict(
        worst <= tol && shape_ok,
        format!("max deviation {worst:.1e}, DR at 3.0103 dB {dr_zero:.1e}, crossover at G = {crossover:.4}"),
    )
}

fn threshold_roots() -> Verdict {
    let mut worst = 0.0_f64;
    for g in [0.9, 0.5, 0.1, 0.01] {
        for v in [4.0, 10.0, 100.0] {
            for s in [1.0 / v, 0.5, 1.0] {
                let eps = security::epsilon_max_rr(g, v, s).unwrap();
                worst = worst.max(security::delta_i_rr(g, vacuum_noise(g) + eps, v, s).unwrap().abs());
            }
        }
    }
    verdict(
        worst < 1e-9,
        format!("max |dI| at the threshold {worst:.1e} over 36 points"),
    )
}

fn monte_carlo_closure() -> Verdict {
    let points = grid(&[0.9, 0.5, 0.1], &[0.0, 0.2], &[4.0, 10.0], &[1.0]);
    let template = RunConfig::new(
        PreparationConfig::coherent(4.0),
        ChannelModel::identity(),
        1_000_000,
        2005,
    )
    .with_attack(Attack::EntanglingCloner);
    let rows = sweep(&points, &template).unwrap();
    let complete = rows.iter().all(|r| r.v_be.is_some() && r.i_be.is_some());
    let worst = rows.iter().fold(0.0_f64, |m, r| m.max(r.max_abs_z()));
    verdict(
        complete && rows.len() == 12 && worst <= Z_GATE,
        format!("{} points, max |z| {worst:.2}", rows.len()),
    )
}

fn black_box() -> Verdict {
    let mut worst = 0.0_f64;
    let mut count = 0;
    for (i, v) in [1.5, 4.0, 10.0, 40.0].into_iter().enumerate() {
        for (j, mu) in [0.25, 1.0, 4.0].into_iter().enumerate() {
            let e = black_box_equivalence(v, mu, 100_000, 600 + 3 * i as u64 + j as u64).unwrap();
            worst = worst.max(e.max_abs_z);
            count += 1;
        }
    }
    verdict(worst <= Z_GATE, format!("{count} points, max |z| {worst:.2}"))
}

fn heisenberg() -> Verdict {
    let mut coin = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0_f64;
    for _ in 0..100 {
        let g = coin.random_range(0.01..0.99);
        let ch = ChannelModel::from_excess(g, coin.random_range(0.0..1.5)).unwrap();
        let v = coin.random_range(1.01..1e3);
        let n0 = ShotNoise::new(coin.random_range(0.1..10.0)).unwrap();
        let (v_ba, _) = alice_conditional_variance(&ch, v, 1.0 / v, n0).unwrap();
        let (_, v_be) = eve_conditional_variance_bound(&ch, v, n0).unwrap();
        worst = worst.max((v_ba * v_be / (n0.value() * n0.value()) - 1.0).abs());
    }
    verdict(
        worst < 1e-12,
        format!("max relative deviation {worst:.1e} over 100 points"),
    )
}

fn separability() -> Verdict {
    let mut coin = ChaCha8Rng::seed_from_u64(8);
    let mut flips = 0;
    for _ in 0..50 {
        let g = coin.random_range(0.01..0.99);
        let v = coin.random_range(1.5..1e3);
        let inside = security::duan_simon(g, vacuum_noise(g) + 2.0 - 1e-9, v).unwrap();
        let outside = security::duan_simon(g, vacuum_noise(g) + 2.0 + 1e-9, v).unwrap();
        flips += usize::from(inside.margin > 0.0 && outside.margin <= 0.0);
    }
    verdict(flips == 50, format!("{flips}/50 pairs change sign"))
}

fn efficiency_claim() -> Verdict {
    let b = security::beta_star(0.01, vacuum_noise(0.01), 10.0, 1.0)
        .unwrap()
        .unwrap();
    verdict((0.88..=0.91).contains(&b), format!("beta* = {b:.4}"))
}

fn key_agreement() -> Verdict {
    let v = 10.0;
    let mut coin = ChaCha8Rng::seed_from_u64(10);
    let (mut succeeded, mut aborted, mut reconciled_count, mut bad) = (0, 0, 0, Vec::new());
    for i in 0..100u64 {
        let g = coin.random_range(0.4..=1.0);
        let eps = coin.random_range(0.0..=0.3);
        let cfg = RunConfig::new(
            PreparationConfig::coherent(v),
            ChannelModel::from_excess(g, eps).unwrap(),
            10_000,
            1000 + i,
        );
        let r = run(&cfg).unwrap();
        let s = distill(&cfg, &r.key, &DistillConfig::new(Direction::Reverse, 1000 + i)).unwrap();
        let secure = security::delta_i_rr(g, vacuum_noise(g) + eps, v, 1.0).unwrap() > 0.0;
        let reconciled = matches!(
            s.outcome,
            Outcome::Success | Outcome::Aborted(AbortReason::NoSecretKey | AbortReason::KeyMismatch)
        );
        reconciled_count += usize::from(reconciled);
        let ok = match s.outcome {
            Outcome::Success => {
                succeeded += 1;
                secure && !s.final_key_a.is_empty() && s.final_key_a == s.final_key_b
            }
            Outcome::Aborted(AbortReason::KeyMismatch) => false,
            Outcome::Aborted(_) => {
                aborted += 1;
                true
            }
        } && (!reconciled || s.corrected_codes == s.reference_codes);
        if !ok {
            bad.push((g, eps, s.outcome));
        }
    }
    let properties = bad.is_empty();

    // Qualitative 3 dB check.
    let cfg = RunConfig::new(
        PreparationConfig::coherent(v),
        ChannelModel::from_excess(0.49, 0.0).unwrap(),
        100_000,
        49,
    );
    let r = run(&cfg).unwrap();
    let s = distill(&cfg, &r.key, &DistillConfig::new(Direction::Reverse, 49)).unwrap();
    let three_db = s.succeeded() && !s.final_key_a.is_empty();
    verdict(
        properties && three_db,
        format!(
            "{succeeded} keys agreed, {aborted} aborted, {reconciled_count} with codewords reconciled, violations {bad:?}; g = 0.49 session: {:?}, key {} bits, beta {:.3}",
            s.outcome,
            s.final_key_a.len(),
            s.beta_achieved
        ),
    )
}

#[test]
fn acceptance() {
    let criteria: [Criterion; 10] = [
        ("headline I_BA and dI at G = 0.01, V = 10", headline_numbers),
        ("BB84 comparison", bb84_comparison),
        ("tolerable-noise curves at V = 1e6", figure_curves),
        ("threshold is a root of the rate", threshold_roots),
        ("Monte Carlo oracle closure", monte_carlo_closure),
        ("black-box equivalence", black_box),
        ("Heisenberg identities", heisenberg),
        ("separability boundary", separability),
        ("reconciliation efficiency claim", efficiency_claim),
        ("end-to-end key agreement", key_agreement),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let v = check();
        println!(
            "criterion {:>2} {}: {name}: {}",
            i + 1,
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
        if !v.pass {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
