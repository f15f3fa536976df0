use cvqkd_core::channel::{vacuum_noise, ChannelModel};
use cvqkd_core::harness::{run, RunConfig};
use cvqkd_core::preparation::PreparationConfig;
use cvqkd_core::reconciliation::{distill, Direction, DistillConfig, KeySession};
use cvqkd_core::security;

fn session(g: f64, eps: f64, v: f64, n: usize, seed: u64, tune: impl FnOnce(&mut DistillConfig)) -> KeySession {
    let cfg = RunConfig::new(
        PreparationConfig::coherent(v),
        ChannelModel::from_excess(g, eps).unwrap(),
        n,
        seed,
    );
    let r = run(&cfg).unwrap();
    let mut d = DistillConfig::new(Direction::Reverse, seed);
    tune(&mut d);
    distill(&cfg, &r.key, &d).unwrap()
}

fn assert_conservative(s: &KeySession, margin: u64) {
    if !s.succeeded() {
        return;
    }
    let charged = s.final_key_a.len() as f64 + s.n as f64 * s.eve_info + s.disclosed_bits as f64 + margin as f64;
    assert!(
        charged <= s.n as f64 * s.codeword_entropy + 1.0,
        "{charged} bits charged"
    );
    let invariant = (s.n as f64 * (s.beta_achieved * s.i_ba - s.eve_info_estimate)).floor();
    assert!(s.final_key_a.len() as f64 <= invariant.max(0.0));
}

#[test]
fn moderate_loss_session_yields_a_key() {
    let s = session(0.9, 0.0, 10.0, 100_000, 41, |_| {});
    assert_conservative(&s, 64);
    assert!(
        s.succeeded(),
        "{:?}, beta {:.3}, slices {:?}",
        s.outcome,
        s.beta_achieved,
        s.slices
    );
    assert!(!s.final_key_a.is_empty());
    assert_eq!(s.final_key_a, s.final_key_b);
    let bound = s.n as f64 * security::delta_i_rr(0.9, vacuum_noise(0.9), 10.0, 1.0).unwrap();
    assert!(s.final_key_a.len() as f64 <= bound);
}

#[test]
fn lossless_session_approaches_the_slice_bound() {
    let v = 1e4;
    let s = session(1.0, 0.0, v, 100_000, 42, |d| d.known_channel = Some((1.0, 0.0)));
    assert!(s.succeeded(), "{:?}", s.outcome);
    assert_eq!(s.final_key_a, s.final_key_b);
    let i_ba = security::mutual_info_ba(1.0, 0.0, v, 1.0).unwrap();
    let bound = i_ba.min(s.m as f64);
    let per_symbol = s.final_key_a.len() as f64 / s.n as f64;
    assert!(
        per_symbol >= 0.75 * bound && per_symbol <= bound,
        "{per_symbol} vs {bound}"
    );
    assert_conservative(&s, 64);
}

#[test]
fn more_noise_never_rescues_an_abort() {
    // Half the symbols sacrificed keeps the ε = 0 point clear of the abort line.
    let outcomes: Vec<(bool, usize)> = [0.0, 0.01, 0.05]
        .iter()
        .map(|&eps| {
            let s = session(1.0, eps, 300.0, 200_000, 46, |d| {
                d.sacrificed_fraction = 0.5;
                d.m = 4;
            });
            assert_conservative(&s, 64);
            (s.succeeded(), s.final_key_a.len())
        })
        .collect();
    assert!(outcomes[0].0, "the noiseless point should succeed: {outcomes:?}");
    for w in outcomes.windows(2) {
        assert!(w[0].0 || !w[1].0, "{outcomes:?}");
        assert!(w[0].1 >= w[1].1, "{outcomes:?}");
    }
}

#[test]
fn direct_reconciliation_above_three_db() {
    let cfg = RunConfig::new(PreparationConfig::coherent(1e4), ChannelModel::identity(), 50_000, 44);
    let r = run(&cfg).unwrap();
    let mut d = DistillConfig::new(Direction::Direct, 44);
    d.known_channel = Some((1.0, 0.0));
    let s = distill(&cfg, &r.key, &d).unwrap();
    assert!(s.succeeded(), "{:?}", s.outcome);
    assert_eq!(s.final_key_a, s.final_key_b);
    // Alice is the reference in direct reconciliation.
    assert_eq!(s.alice_values.len(), s.reference_codes.len());
}
