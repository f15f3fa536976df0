use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use cvqkd_core::channel::ChannelModel;
use cvqkd_core::harness::{self, Attack, BobBasis, Comparison, Route, RunConfig, SweepRow, Z_GATE};
use cvqkd_core::preparation::PreparationConfig;
use cvqkd_core::reconciliation::{
    self, distill, AbortReason, ChannelEstimate, Direction, DistillConfig, KeySession, Outcome, SliceReport,
};
use cvqkd_core::security::{self, CurvePoint, SecurityReport};
use cvqkd_core::ShotNoise;
use serde::Serialize;

/// Bumped whenever a field of any JSON or CSV output changes. Output paths
/// are left out of the config echo so reports are byte-stable across them.
const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(
    name = "cvqkd",
    version,
    about = "Gaussian-modulated CV-QKD security curves, simulation and key distillation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Tolerable excess noise against line loss.
    SecurityCurve(CurveArgs),
    /// Closed-form rates at one operating point.
    Keyrate(KeyrateArgs),
    /// Monte Carlo run at one operating point.
    Simulate(SimulateArgs),
    /// Monte Carlo sweep checked against the closed forms.
    Verify(VerifyArgs),
    /// End-to-end key distillation.
    Distill(DistillArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum Mode {
    Coherent,
    Squeezed,
    Epr,
}

#[derive(Debug, Clone, Args, Serialize)]
#[group(required = true, multiple = false)]
struct Line {
    /// Line transmission G.
    #[arg(long)]
    g: Option<f64>,
    /// Line loss in dB.
    #[arg(long = "loss-db")]
    loss_db: Option<f64>,
}

impl Line {
    fn gain(&self) -> f64 {
        match (self.g, self.loss_db) {
            (Some(g), _) => g,
            (_, Some(db)) => security::loss_db_to_gain(db),
            _ => unreachable!("clap requires one of --g and --loss-db"),
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
struct Operating {
    #[command(flatten)]
    #[serde(flatten)]
    line: Line,
    /// Modulation variance V in shot-noise units.
    #[arg(long)]
    v: f64,
    /// Excess noise ε in shot-noise units.
    #[arg(long, default_value_t = 0.0)]
    eps: f64,
    #[arg(long, value_enum, default_value_t = Mode::Coherent)]
    mode: Mode,
    /// Squeezing of the sent states (squeezed mode).
    #[arg(long)]
    s: Option<f64>,
    /// Noise ratio of Alice's joint measurement (squeezed mode).
    #[arg(long)]
    mu: Option<f64>,
    /// Shot-noise variance; dimensionless outputs do not depend on it.
    #[arg(long, default_value_t = 1.0)]
    n0: f64,
}

impl Operating {
    fn preparation(&self) -> Result<PreparationConfig, Failure> {
        let prep = match (self.mode, self.s, self.mu) {
            (Mode::Coherent, None, None) => PreparationConfig::coherent(self.v),
            (Mode::Epr, None, None) => PreparationConfig::epr(self.v),
            (Mode::Squeezed, Some(s), None) => PreparationConfig::squeezed(self.v, s)?,
            (Mode::Squeezed, None, Some(mu)) => PreparationConfig::joint(self.v, mu),
            (Mode::Squeezed, _, _) => {
                return Err(Failure::Validation(
                    "squeezed mode needs exactly one of --s and --mu".into(),
                ))
            }
            _ => return Err(Failure::Validation("--s and --mu apply to squeezed mode only".into())),
        };
        let prep = prep.with_n0(ShotNoise::new(self.n0)?);
        prep.validate()?;
        Ok(prep)
    }

    fn channel(&self) -> Result<ChannelModel, Failure> {
        Ok(ChannelModel::from_excess(self.line.gain(), self.eps)?)
    }
}

#[derive(Debug, Clone, Args, Serialize)]
struct Output {
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// Write to this file instead of standard output.
    #[arg(long)]
    #[serde(skip)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
struct CurveArgs {
    #[arg(long, default_value_t = security::V_LARGE)]
    v: f64,
    #[arg(long = "loss-min", default_value_t = 0.0)]
    loss_min: f64,
    #[arg(long = "loss-max", default_value_t = 40.0)]
    loss_max: f64,
    #[arg(long, default_value_t = 20)]
    points: usize,
    /// Show negative direct-reconciliation thresholds as 0.
    #[arg(long = "clip-dr")]
    clip_dr: bool,
    #[arg(long, default_value_t = 1.0)]
    n0: f64,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
    #[arg(long)]
    #[serde(skip)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
struct KeyrateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    op: Operating,
    /// Reconciliation efficiency for the practical rate.
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    #[serde(skip)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum AttackArg {
    None,
    Cloner,
}

#[derive(Debug, Clone, Args, Serialize)]
struct SimulateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    op: Operating,
    #[arg(long, default_value_t = 100_000)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = AttackArg::None)]
    attack: AttackArg,
    /// Bob picks his quadrature at random and the rows are sifted.
    #[arg(long = "random-basis")]
    random_basis: bool,
    /// Generate states through the EPR route.
    #[arg(long = "epr-route")]
    epr_route: bool,
    #[arg(long)]
    #[serde(skip)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
struct VerifyArgs {
    #[arg(long = "g", value_delimiter = ',', default_values_t = [0.9, 0.5, 0.1])]
    gs: Vec<f64>,
    #[arg(long = "eps", value_delimiter = ',', default_values_t = [0.0, 0.2])]
    epss: Vec<f64>,
    #[arg(long = "v", value_delimiter = ',', default_values_t = [4.0, 10.0])]
    vs: Vec<f64>,
    #[arg(long = "mu", value_delimiter = ',', default_values_t = [1.0])]
    mus: Vec<f64>,
    #[arg(long, default_value_t = 100_000)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    n0: f64,
    /// Negative control: scale every closed-form value by `1 + bias` before
    /// computing z-scores.
    #[arg(long = "inject-bias", default_value_t = 0.0)]
    inject_bias: f64,
    #[command(flatten)]
    #[serde(flatten)]
    output: Output,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum DirectionArg {
    Rr,
    Dr,
}

#[derive(Debug, Clone, Args, Serialize)]
struct DistillArgs {
    #[command(flatten)]
    #[serde(flatten)]
    op: Operating,
    #[arg(long, default_value_t = 100_000)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = DirectionArg::Rr)]
    direction: DirectionArg,
    /// Bits per slice stack.
    #[arg(long, default_value_t = reconciliation::DEFAULT_SLICES)]
    m: u32,
    #[arg(long, default_value_t = reconciliation::DEFAULT_SACRIFICE)]
    sacrifice: f64,
    #[arg(long, default_value_t = reconciliation::DEFAULT_MARGIN_BITS)]
    margin: u64,
    #[arg(long = "max-passes", default_value_t = reconciliation::DEFAULT_MAX_PASSES)]
    max_passes: usize,
    /// Size privacy amplification from the configured channel instead of the
    /// estimate's confidence limit.
    #[arg(long = "known-channel")]
    known_channel: bool,
    /// Directory for key files and the message log.
    #[arg(long)]
    #[serde(skip)]
    out: Option<PathBuf>,
}

#[derive(Debug)]
enum Failure {
    Validation(String),
    SecurityAbort(String),
    Verification(String),
    Io(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 2,
            Failure::SecurityAbort(_) => 3,
            Failure::Verification(_) => 4,
            Failure::Io(_) => 1,
        }
    }
}

impl From<cvqkd_core::Error> for Failure {
    fn from(e: cvqkd_core::Error) -> Self {
        Failure::Validation(e.to_string())
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Io(e)
    }
}

#[derive(Serialize)]
struct Envelope<'a, C: Serialize, R: Serialize> {
    schema_version: u32,
    command: &'a str,
    config: &'a C,
    result: R,
}

fn json<C: Serialize, R: Serialize>(command: &str, config: &C, result: R) -> anyhow::Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(&Envelope {
        schema_version: SCHEMA_VERSION,
        command,
        config,
        result,
    })?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> anyhow::Result<()> {
    match out {
        Some(p) => fs::write(p, bytes).with_context(|| format!("writing {}", p.display())),
        None => Ok(std::io::stdout().write_all(bytes)?),
    }
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> anyhow::Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| anyhow::anyhow!("{e}"))
}

fn security_curve(a: &CurveArgs) -> Result<(), Failure> {
    ShotNoise::new(a.n0)?;
    if a.points < 2 || a.loss_min > a.loss_max {
        return Err(Failure::Validation(
            "need --points >= 2 and --loss-min <= --loss-max".into(),
        ));
    }
    let rows = (0..a.points)
        .map(|i| {
            let loss = a.loss_min + (a.loss_max - a.loss_min) * i as f64 / (a.points - 1) as f64;
            let mut p = security::curve_point(loss, a.v)?;
            if a.clip_dr {
                p.eps_max_dr = p.eps_max_dr.max(0.0);
            }
            Ok(p)
        })
        .collect::<Result<Vec<CurvePoint>, cvqkd_core::Error>>()?;
    let bytes = match a.format {
        Format::Csv => csv_bytes(&rows)?,
        Format::Json => json("security-curve", a, &rows)?,
    };
    Ok(emit(a.out.as_deref(), &bytes)?)
}

#[derive(Serialize)]
struct KeyrateResult {
    report: SecurityReport,
    /// `β·I_BA − I_BE`, sifting applied.
    practical_rate: Option<f64>,
    beta_star: Option<f64>,
}

fn keyrate(a: &KeyrateArgs) -> Result<(), Failure> {
    let report = SecurityReport::for_config(&a.op.channel()?, &a.op.preparation()?)?;
    let (practical_rate, beta_star) = match a.beta {
        Some(beta) => (
            Some(
                report.basis_sifting_factor * security::practical_rate(report.g, report.chi, report.v, report.s, beta)?,
            ),
            security::beta_star(report.g, report.chi, report.v, report.s)?,
        ),
        None => (None, None),
    };
    let result = KeyrateResult {
        report,
        practical_rate,
        beta_star,
    };
    Ok(emit(a.out.as_deref(), &json("keyrate", a, result)?)?)
}

#[derive(Serialize)]
struct SimulateResult {
    analytic: harness::Analytic,
    q_rows: usize,
    sifted_fraction: f64,
    v_ba: Comparison,
    i_ba: Comparison,
    v_be: Option<Comparison>,
    i_be: Option<Comparison>,
}

fn compare(analytic: f64, e: harness::Estimate) -> Comparison {
    Comparison {
        analytic,
        empirical: e.value,
        stderr: e.stderr,
        z: e.z(analytic),
    }
}

fn simulate(a: &SimulateArgs) -> Result<(), Failure> {
    let mut cfg = RunConfig::new(a.op.preparation()?, a.op.channel()?, a.n, a.seed);
    if a.attack == AttackArg::Cloner {
        cfg = cfg.with_attack(Attack::EntanglingCloner);
    }
    if a.random_basis {
        cfg = cfg.with_bob_basis(BobBasis::Random);
    }
    if a.epr_route {
        cfg = cfg.with_route(Route::Epr);
    }
    let expected = harness::analytic(&cfg)?;
    let r = harness::run(&cfg)?;
    let result = SimulateResult {
        analytic: expected,
        q_rows: r.q_rows,
        sifted_fraction: r.sifted_fraction.value,
        v_ba: compare(expected.v_ba, r.v_ba_hat),
        i_ba: compare(expected.i_ba, r.i_ba_hat),
        v_be: r.v_be_hat.map(|e| compare(expected.v_be, e)),
        i_be: r.i_be_hat.map(|e| compare(expected.i_be, e)),
    };
    Ok(emit(a.out.as_deref(), &json("simulate", a, result)?)?)
}

#[derive(Debug, Serialize)]
struct VerifyRow {
    index: usize,
    g: f64,
    eps: f64,
    v: f64,
    mu: f64,
    n: usize,
    seed: u64,
    z_v_ba: f64,
    z_i_ba: f64,
    z_v_be: Option<f64>,
    z_i_be: Option<f64>,
    max_abs_z: f64,
    pass: bool,
}

fn biased_z(c: &Comparison, bias: f64) -> f64 {
    if bias == 0.0 {
        return c.z;
    }
    (c.empirical - c.analytic * (1.0 + bias)) / c.stderr
}

fn verify_row(r: &SweepRow, bias: f64) -> VerifyRow {
    let z_v_ba = biased_z(&r.v_ba, bias);
    let z_i_ba = biased_z(&r.i_ba, bias);
    let z_v_be = r.v_be.map(|c| biased_z(&c, bias));
    let z_i_be = r.i_be.map(|c| biased_z(&c, bias));
    let max_abs_z = [Some(z_v_ba), Some(z_i_ba), z_v_be, z_i_be]
        .into_iter()
        .flatten()
        .fold(0.0_f64, |m, z| m.max(z.abs()));
    VerifyRow {
        index: r.index,
        g: r.point.g,
        eps: r.point.eps,
        v: r.point.v,
        mu: r.point.mu,
        n: r.n,
        seed: r.seed,
        z_v_ba,
        z_i_ba,
        z_v_be,
        z_i_be,
        max_abs_z,
        pass: max_abs_z <= Z_GATE,
    }
}

fn verify(a: &VerifyArgs) -> Result<(), Failure> {
    let points = harness::grid(&a.gs, &a.epss, &a.vs, &a.mus);
    let first = points
        .first()
        .ok_or_else(|| Failure::Validation("verification grid is empty".into()))?;
    let prep = PreparationConfig::joint(first.v, first.mu).with_n0(ShotNoise::new(a.n0)?);
    // The cloner needs a lossy line; lossless points are checked without Eve.
    let attack = if a.gs.iter().all(|&g| g < 1.0) {
        Attack::EntanglingCloner
    } else {
        Attack::None
    };
    let template = RunConfig::new(prep, ChannelModel::identity(), a.n, a.seed).with_attack(attack);
    let rows: Vec<VerifyRow> = harness::sweep(&points, &template)?
        .iter()
        .map(|r| verify_row(r, a.inject_bias))
        .collect();
    let bytes = match a.output.format {
        Format::Csv => csv_bytes(&rows)?,
        Format::Json => json("verify", a, &rows)?,
    };
    emit(a.output.out.as_deref(), &bytes)?;
    let flagged = rows.iter().filter(|r| !r.pass).count();
    if flagged > 0 {
        return Err(Failure::Verification(format!(
            "{flagged} of {} grid points exceed |z| = {Z_GATE}",
            rows.len()
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct DistillReport<'a> {
    outcome: &'a Outcome,
    direction: Direction,
    m: u32,
    key_symbols: usize,
    estimate: &'a ChannelEstimate,
    slices: &'a [SliceReport],
    disclosed_bits: u64,
    codeword_entropy: f64,
    i_ba: f64,
    eve_info_estimate: f64,
    eve_info: f64,
    beta_achieved: f64,
    key_bits: usize,
    key_sha256_alice: String,
    key_sha256_bob: String,
    messages: usize,
}

fn write_keys(dir: &Path, s: &KeySession) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for (name, key) in [("alice", &s.final_key_a), ("bob", &s.final_key_b)] {
        let bits: String = key.iter().map(|b| if *b == 1 { '1' } else { '0' }).collect();
        fs::write(dir.join(format!("key_{name}.bits")), bits + "\n")?;
        fs::write(
            dir.join(format!("key_{name}.hex")),
            hex::encode(reconciliation::pack(key)) + "\n",
        )?;
    }
    let mut log = Vec::new();
    for m in &s.log {
        serde_json::to_writer(&mut log, m)?;
        log.push(b'\n');
    }
    fs::write(dir.join("messages.jsonl"), log)?;
    Ok(())
}

fn distill_cmd(a: &DistillArgs) -> Result<(), Failure> {
    let cfg = RunConfig::new(a.op.preparation()?, a.op.channel()?, a.n, a.seed);
    let direction = match a.direction {
        DirectionArg::Rr => Direction::Reverse,
        DirectionArg::Dr => Direction::Direct,
    };
    let mut d = DistillConfig::new(direction, a.seed);
    d.m = a.m;
    d.sacrificed_fraction = a.sacrifice;
    d.margin_bits = a.margin;
    d.max_passes = a.max_passes;
    if a.known_channel {
        let ch = a.op.channel()?;
        d.known_channel = Some((ch.g_q, ch.chi_q));
    }
    let r = harness::run(&cfg)?;
    let s = distill(&cfg, &r.key, &d)?;
    let report = DistillReport {
        outcome: &s.outcome,
        direction,
        m: s.m,
        key_symbols: s.n,
        estimate: &s.estimate,
        slices: &s.slices,
        disclosed_bits: s.disclosed_bits,
        codeword_entropy: s.codeword_entropy,
        i_ba: s.i_ba,
        eve_info_estimate: s.eve_info_estimate,
        eve_info: s.eve_info,
        beta_achieved: s.beta_achieved,
        key_bits: s.final_key_a.len(),
        key_sha256_alice: hex::encode(KeySession::key_hash(&s.final_key_a)),
        key_sha256_bob: hex::encode(KeySession::key_hash(&s.final_key_b)),
        messages: s.log.len(),
    };
    let bytes = json("distill", a, &report)?;
    match &a.out {
        Some(dir) => {
            write_keys(dir, &s)?;
            emit(Some(&dir.join("report.json")), &bytes)?;
        }
        None => emit(None, &bytes)?,
    }
    match &s.outcome {
        Outcome::Success => Ok(()),
        Outcome::Aborted(AbortReason::DirectReconciliationInsecure) => {
            Err(Failure::SecurityAbort("aborted: insecure".into()))
        }
        Outcome::Aborted(reason) => Err(Failure::SecurityAbort(format!("aborted: {reason:?}"))),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::SecurityCurve(a) => security_curve(a),
        Command::Keyrate(a) => keyrate(a),
        Command::Simulate(a) => simulate(a),
        Command::Verify(a) => verify(a),
        Command::Distill(a) => distill_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Validation(m) => eprintln!("error: {m}"),
                Failure::SecurityAbort(m) | Failure::Verification(m) => eprintln!("{m}"),
                Failure::Io(e) => eprintln!("error: {e:#}"),
            }
            ExitCode::from(f.code())
        }
    }
}
