//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage, 2 configuration, 3 protocol abort,
//! 4 verification failure. Every output file starts with a provenance line
//! carrying the config digest and seed; files written by a failing command
//! are removed.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::cascade::{bench, BenchSummary, CascadeConfig, Transcript};
use crate::config::{load_config, ConfigError, RunConfig};
use crate::keyrate::{self, asymmetric_grid, key_rate, optimize_bias, rate_at_bias, symmetric_curve, BiasSearch, KeyRateParams};
use crate::privacy::{write_key_file, KeyFileHeader};
use crate::session::{
    compare_reports, qber_timeseries, run_party, run_session, write_qber_csv, PartyOutcome, SessionError,
    SessionConfig, SessionFailure, SessionReport, TcpTransport, TransportKind,
};
use crate::source::Role;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_PROTOCOL: i32 = 3;
pub const EXIT_VERIFICATION: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "bqkd", version, about = "Biased-basis QKD post-processing simulator")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `session.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides `session.rounds`.
    #[arg(long, global = true)]
    pub rounds: Option<u64>,
    /// Output directory; overrides `output.dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub role: Option<RoleArg>,
    #[arg(long, global = true)]
    pub listen: Option<String>,
    #[arg(long, global = true)]
    pub connect: Option<String>,
    #[arg(long, global = true, value_enum, default_value = "csv")]
    pub format: Format,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RoleArg {
    Alice,
    Bob,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a full session and write the report, QBER series, transcripts
    /// and final key.
    Simulate {
        /// Transport for single-process runs; overrides `transport.kind`.
        #[arg(long, value_enum)]
        transport: Option<TransportArg>,
    },
    /// Key rate against the Z-basis probability.
    OptimizeBias {
        /// Also write the (q_a, q_b) grid.
        #[arg(long)]
        grid: bool,
    },
    /// Evaluate the key rate at one operating point.
    Keyrate(KeyrateArgs),
    /// Repeated cascade runs at the configured channel error rates.
    CascadeBench(BenchArgs),
    /// Ratio table over saved session reports.
    Compare {
        /// Report files written by `simulate`.
        #[arg(required = true, num_args = 1..)]
        reports: Vec<PathBuf>,
        #[arg(long, default_value_t = 0)]
        baseline: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TransportArg {
    Channel,
    Tcp,
}

#[derive(Debug, Args)]
pub struct KeyrateArgs {
    /// Symmetric bias; sets both q_a and q_b.
    #[arg(long)]
    pub q: Option<f64>,
    #[arg(long)]
    pub q_a: Option<f64>,
    #[arg(long)]
    pub q_b: Option<f64>,
    #[arg(long)]
    pub e_bx: Option<f64>,
    #[arg(long)]
    pub e_bz: Option<f64>,
    #[arg(long)]
    pub f_x: Option<f64>,
    #[arg(long)]
    pub f_z: Option<f64>,
    #[arg(long)]
    pub eps_x: Option<f64>,
    #[arg(long)]
    pub eps_z: Option<f64>,
    /// Solve the deviations for this many raw rounds instead of taking
    /// them from the flags.
    #[arg(long)]
    pub n_total: Option<f64>,
    #[arg(long)]
    pub p_eps: Option<f64>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 200)]
    pub runs: usize,
    #[arg(long, default_value_t = 1208)]
    pub length_x: usize,
    #[arg(long, default_value_t = 927)]
    pub length_z: usize,
    /// Defaults to `source.p_bx`, or 0.054 without a config.
    #[arg(long)]
    pub qber_x: Option<f64>,
    /// Defaults to `source.p_bz`, or 0.012 without a config.
    #[arg(long)]
    pub qber_z: Option<f64>,
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::new(EXIT_CONFIG, format!("config error: {e}"))
    }
}

impl From<SessionError> for CliError {
    fn from(e: SessionError) -> Self {
        let code = if e.is_verification() {
            EXIT_VERIFICATION
        } else if matches!(e, SessionError::Config(_) | SessionError::Source(_)) {
            EXIT_CONFIG
        } else {
            EXIT_PROTOCOL
        };
        CliError::new(code, format!("session aborted: {e}"))
    }
}

impl From<SessionFailure> for CliError {
    fn from(f: SessionFailure) -> Self {
        let retained = f.transcript_x.len() + f.transcript_z.len();
        let mut e = CliError::from(f.error);
        if retained > 0 {
            e.message.push_str(&format!(" ({retained} transcript entries retained in memory)"));
        }
        e
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::new(EXIT_USAGE, format!("cannot write {}: {e}", path.display()))
}

/// Collects output files so they can be removed if the command fails.
struct Outputs {
    dir: PathBuf,
    written: Vec<PathBuf>,
}

impl Outputs {
    fn new(dir: PathBuf) -> Result<Self, CliError> {
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        Ok(Self { dir, written: Vec::new() })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.dir.join(name);
        self.written.push(path.clone());
        fs::write(&path, bytes).map_err(|e| io_err(&path, e))?;
        Ok(path)
    }

    fn discard(&mut self) {
        for p in self.written.drain(..) {
            let _ = fs::remove_file(p);
        }
    }
}

/// Provenance comment placed at the top of CSV outputs.
fn provenance(digest: &str, seed: u64) -> String {
    format!("# config_digest={digest} seed={seed}\n")
}

/// Entry point: parses `args` (program name first) and returns the exit
/// code. Messages go to stdout/stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

fn execute(cli: &Cli) -> Result<(), CliError> {
    let g = &cli.global;
    match &cli.command {
        Command::Simulate { transport } => {
            let cfg = required_config(g)?;
            with_outputs(out_dir(g, Some(&cfg)), |o| simulate(g, &cfg, *transport, o))
        }
        Command::OptimizeBias { grid } => {
            let cfg = required_config(g)?;
            with_outputs(out_dir(g, Some(&cfg)), |o| optimize(g, &cfg, *grid, o))
        }
        Command::Keyrate(args) => {
            let cfg = optional_config(g)?;
            keyrate_cmd(g, cfg.as_ref(), args)
        }
        Command::CascadeBench(args) => {
            let cfg = optional_config(g)?;
            with_outputs(out_dir(g, cfg.as_ref()), |o| cascade_bench(g, cfg.as_ref(), args, o))
        }
        Command::Compare { reports, baseline } => {
            let cfg = optional_config(g)?;
            with_outputs(out_dir(g, cfg.as_ref()), |o| compare(g, reports, *baseline, o))
        }
    }
}

fn with_outputs(dir: PathBuf, f: impl FnOnce(&mut Outputs) -> Result<(), CliError>) -> Result<(), CliError> {
    let mut out = Outputs::new(dir)?;
    let result = f(&mut out);
    if result.is_err() {
        out.discard();
    }
    result
}

fn apply_overrides(g: &GlobalArgs, mut cfg: RunConfig) -> Result<RunConfig, CliError> {
    if let Some(seed) = g.seed {
        cfg.session.seed = seed;
    }
    if let Some(rounds) = g.rounds {
        cfg.session.rounds = rounds;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn required_config(g: &GlobalArgs) -> Result<RunConfig, CliError> {
    match &g.config {
        Some(p) => apply_overrides(g, load_config(p)?),
        None => Err(CliError::new(EXIT_USAGE, "this command needs --config <path>")),
    }
}

fn optional_config(g: &GlobalArgs) -> Result<Option<RunConfig>, CliError> {
    g.config.as_ref().map(|p| apply_overrides(g, load_config(p)?)).transpose()
}

fn out_dir(g: &GlobalArgs, cfg: Option<&RunConfig>) -> PathBuf {
    g.out
        .clone()
        .or_else(|| cfg.map(|c| PathBuf::from(&c.output.dir)))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn transcript_csv(digest: &str, seed: u64, t: &Transcript) -> Vec<u8> {
    let mut buf = provenance(digest, seed).into_bytes();
    t.write_csv(&mut buf).expect("in-memory write");
    buf
}

#[derive(Serialize)]
struct ReportDocument<'a> {
    #[serde(flatten)]
    report: &'a SessionReport,
    config: String,
}

fn write_party_outputs(cfg: &RunConfig, party: &PartyOutcome, suffix: &str, out: &mut Outputs) -> Result<(), CliError> {
    let r = &party.report;
    let (digest, seed) = (r.config_digest.as_str(), r.seed);
    let doc = ReportDocument {
        report: r,
        config: cfg.to_toml(),
    };
    let json = serde_json::to_string_pretty(&doc).expect("report serializes");
    out.write(&format!("report{suffix}.json"), json.as_bytes())?;

    let series = qber_timeseries(&party.events, cfg.session.qber_window)?;
    let mut csv = provenance(digest, seed).into_bytes();
    write_qber_csv(&mut csv, &series).expect("in-memory write");
    out.write(&format!("qber{suffix}.csv"), &csv)?;

    out.write(&format!("transcript_x{suffix}.csv"), &transcript_csv(digest, seed, &party.transcript_x))?;
    out.write(&format!("transcript_z{suffix}.csv"), &transcript_csv(digest, seed, &party.transcript_z))?;

    let header = KeyFileHeader {
        session_id: r.session_id.clone(),
        length_bits: party.final_key.len(),
        config_digest: digest.to_string(),
        seed,
    };
    let mut key = Vec::new();
    write_key_file(&mut key, &party.final_key, &header).expect("in-memory write");
    out.write(&format!("final_key{suffix}.bin"), &key)?;
    Ok(())
}

fn simulate(g: &GlobalArgs, cfg: &RunConfig, transport: Option<TransportArg>, out: &mut Outputs) -> Result<(), CliError> {
    let session = cfg.session();
    let report = if let Some(role) = g.role {
        let role = match role {
            RoleArg::Alice => Role::Alice,
            RoleArg::Bob => Role::Bob,
        };
        let listen = g.listen.clone().or_else(|| cfg.transport.listen.clone());
        let connect = g.connect.clone().or_else(|| cfg.transport.connect.clone());
        let mut t = match (listen, connect) {
            (Some(addr), None) => TcpTransport::listen(addr.as_str())?,
            (None, Some(addr)) => TcpTransport::connect(addr.as_str(), Duration::from_secs(30))?,
            _ => return Err(CliError::new(EXIT_USAGE, "--role needs exactly one of --listen or --connect")),
        };
        let party = run_party(role, &session, &mut t)?;
        let suffix = match role {
            Role::Alice => "_alice",
            Role::Bob => "_bob",
        };
        write_party_outputs(cfg, &party, suffix, out)?;
        party.report
    } else {
        if g.listen.is_some() || g.connect.is_some() {
            return Err(CliError::new(EXIT_USAGE, "--listen/--connect require --role"));
        }
        let kind = match transport {
            Some(TransportArg::Channel) => TransportKind::Channel,
            Some(TransportArg::Tcp) => TransportKind::Tcp,
            None => cfg.transport.kind.unwrap_or(TransportKind::Channel),
        };
        let outcome = run_session(&session, kind)?;
        write_party_outputs(cfg, &outcome.alice, "", out)?;
        outcome.alice.report
    };
    println!(
        "session {}: raw={} sifted={} qber_x={:.4} qber_z={:.4} final={} secure_per_raw={:.4}",
        report.session_id, report.raw_len, report.sifted_len, report.qber_x, report.qber_z, report.final_len, report.secure_per_raw
    );
    Ok(())
}

fn optimize(g: &GlobalArgs, cfg: &RunConfig, grid: bool, out: &mut Outputs) -> Result<(), CliError> {
    let input = cfg.optimize_input();
    let (digest, seed) = (cfg.digest(), cfg.session.seed);
    let curve = symmetric_curve(&input).map_err(keyrate_err)?;
    let best = optimize_bias(&input, BiasSearch::Symmetric).map_err(keyrate_err)?;
    match g.format {
        Format::Csv => {
            let mut csv = provenance(&digest, seed);
            csv.push_str("q,eps_x,eps_z,R\n");
            for p in &curve {
                csv.push_str(&format!("{},{},{},{}\n", p.q_a, p.eps_x, p.eps_z, p.rate));
            }
            out.write("curve.csv", csv.as_bytes())?;
        }
        Format::Json => {
            let rows: Vec<_> = curve
                .iter()
                .map(|p| serde_json::json!({"q": p.q_a, "eps_x": p.eps_x, "eps_z": p.eps_z, "R": p.rate}))
                .collect();
            let doc = serde_json::json!({"config_digest": digest, "seed": seed, "curve": rows, "best": best.best});
            out.write("curve.json", serde_json::to_string_pretty(&doc).unwrap().as_bytes())?;
        }
    }
    println!("symmetric optimum: q={:.4} R={:.6}", best.best.q_a, best.rate);
    if grid || cfg.optimize.asymmetric {
        let points = asymmetric_grid(&input, cfg.optimize.grid_step).map_err(keyrate_err)?;
        let mut csv = provenance(&digest, seed);
        csv.push_str("q_a,q_b,R\n");
        for p in &points {
            csv.push_str(&format!("{},{},{}\n", p.q_a, p.q_b, p.rate));
        }
        out.write("grid.csv", csv.as_bytes())?;
        let asym = optimize_bias(&input, BiasSearch::Asymmetric).map_err(keyrate_err)?;
        println!("asymmetric optimum: q_a={:.4} q_b={:.4} R={:.6}", asym.best.q_a, asym.best.q_b, asym.rate);
    }
    Ok(())
}

fn keyrate_err(e: keyrate::KeyRateError) -> CliError {
    CliError::new(EXIT_CONFIG, format!("invalid key-rate input: {e}"))
}

fn keyrate_cmd(g: &GlobalArgs, cfg: Option<&RunConfig>, a: &KeyrateArgs) -> Result<(), CliError> {
    let need = |v: Option<f64>, fallback: Option<f64>, name: &str| {
        v.or(fallback)
            .ok_or_else(|| CliError::new(EXIT_USAGE, format!("missing --{name} (or a config providing it)")))
    };
    let q_a = need(a.q_a.or(a.q), cfg.map(|c| c.alice.q), "q-a")?;
    let q_b = need(a.q_b.or(a.q), cfg.map(|c| c.bob.q), "q-b")?;
    let e_bx = need(a.e_bx, cfg.map(|c| c.source.p_bx), "e-bx")?;
    let e_bz = need(a.e_bz, cfg.map(|c| c.source.p_bz), "e-bz")?;
    let f_x = need(a.f_x, Some(cfg.map_or(1.0, |c| c.optimize.f_x)), "f-x")?;
    let f_z = need(a.f_z, Some(cfg.map_or(1.0, |c| c.optimize.f_z)), "f-z")?;
    let n_total = a.n_total.or_else(|| cfg.and_then(|c| c.optimize.n_total));
    let (eps_x, eps_z) = match n_total {
        Some(n) if a.eps_x.is_none() && a.eps_z.is_none() => {
            let p_eps = a.p_eps.unwrap_or_else(|| cfg.map_or(SessionConfig::default().p_eps, |c| c.session.p_eps));
            let input = keyrate::OptimizeInput {
                n_total: n,
                e_bx,
                e_bz,
                f_x,
                f_z,
                p_eps,
            };
            input.validate().map_err(keyrate_err)?;
            let p = rate_at_bias(&input, q_a, q_b);
            (p.eps_x, p.eps_z)
        }
        _ => (a.eps_x.unwrap_or(0.0), a.eps_z.unwrap_or(0.0)),
    };
    let params = KeyRateParams {
        q_a,
        q_b,
        e_bx,
        e_bz,
        f_x,
        f_z,
        eps_x,
        eps_z,
    };
    let r = key_rate(&params).map_err(keyrate_err)?;
    let text = match g.format {
        Format::Csv => format!("q_a,q_b,e_bx,e_bz,f_x,f_z,eps_x,eps_z,R\n{q_a},{q_b},{e_bx},{e_bz},{f_x},{f_z},{eps_x},{eps_z},{}\n", r.rate),
        Format::Json => {
            let mut v = serde_json::to_value(params).unwrap();
            v["R"] = serde_json::json!(r.rate);
            v["clamped"] = serde_json::json!(r.clamped);
            format!("{}\n", serde_json::to_string_pretty(&v).unwrap())
        }
    };
    print!("{text}");
    if let Some(dir) = &g.out {
        let (digest, seed) = cfg.map_or((String::from("none"), 0), |c| (c.digest(), c.session.seed));
        let name = match g.format {
            Format::Csv => "keyrate.csv",
            Format::Json => "keyrate.json",
        };
        with_outputs(dir.clone(), |o| {
            let body = match g.format {
                Format::Csv => format!("{}{text}", provenance(&digest, seed)),
                Format::Json => text.clone(),
            };
            o.write(name, body.as_bytes()).map(|_| ())
        })?;
    }
    Ok(())
}

fn cascade_bench(g: &GlobalArgs, cfg: Option<&RunConfig>, a: &BenchArgs, out: &mut Outputs) -> Result<(), CliError> {
    let config = cfg.map_or(CascadeConfig::default(), |c| c.cascade);
    let seed = g.seed.or(cfg.map(|c| c.session.seed)).unwrap_or(1);
    let digest = cfg.map_or_else(
        || {
            let desc = format!("cascade-bench {config:?} {} {} {:?} {:?}", a.length_x, a.length_z, a.qber_x, a.qber_z);
            hex::encode(Sha256::digest(desc.as_bytes()))
        },
        |c| c.digest(),
    );
    let qx = a.qber_x.or(cfg.map(|c| c.source.p_bx)).unwrap_or(0.054);
    let qz = a.qber_z.or(cfg.map(|c| c.source.p_bz)).unwrap_or(0.012);
    let run = |n: usize, q: f64, s: u64| {
        bench(n, q, a.runs, &config, s).map_err(|e| CliError::new(EXIT_CONFIG, format!("cascade-bench: {e}")))
    };
    let results: Vec<(&str, BenchSummary)> = vec![("X", run(a.length_x, qx, seed)?), ("Z", run(a.length_z, qz, seed.wrapping_add(1))?)];

    if g.format == Format::Json {
        let doc = serde_json::json!({
            "config_digest": digest,
            "seed": seed,
            "bases": results.iter().map(|(b, s)| serde_json::json!({"basis": b, "summary": s})).collect::<Vec<_>>(),
        });
        out.write("cascade_bench.json", serde_json::to_string_pretty(&doc).unwrap().as_bytes())?;
    } else {
        let mut blocks = provenance(&digest, seed);
        blocks.push_str("basis,pass,block_size\n");
        let mut errors = provenance(&digest, seed);
        errors.push_str("basis,pass,sequence,mean_errors\n");
        let mut summary = provenance(&digest, seed);
        summary.push_str("basis,runs,key_length,qber,bits_revealed,bits_revealed_biconf,efficiency,errors_biconf,residual_failures\n");
        for (b, s) in &results {
            for (i, k) in s.block_sizes.iter().enumerate() {
                blocks.push_str(&format!("{b},{},{k}\n", i + 1));
            }
            for (i, row) in s.errors_per_pass_per_sequence.iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    errors.push_str(&format!("{b},{},{},{v}\n", i + 1, j + 1));
                }
            }
            summary.push_str(&format!(
                "{b},{},{},{},{},{},{},{},{}\n",
                s.runs, s.key_length, s.qber, s.bits_revealed, s.bits_revealed_biconf, s.efficiency, s.errors_biconf, s.residual_failures
            ));
        }
        out.write("block_sizes.csv", blocks.as_bytes())?;
        out.write("errors_per_pass.csv", errors.as_bytes())?;
        out.write("summary.csv", summary.as_bytes())?;
    }
    for (b, s) in &results {
        println!(
            "{b}: length={} qber={:.4} revealed={:.1} f={:.3} residual_failures={}",
            s.key_length, s.qber, s.bits_revealed, s.efficiency, s.residual_failures
        );
    }
    Ok(())
}

fn compare(g: &GlobalArgs, paths: &[PathBuf], baseline: usize, out: &mut Outputs) -> Result<(), CliError> {
    let mut reports = Vec::with_capacity(paths.len());
    for p in paths {
        let text = fs::read_to_string(p).map_err(|e| CliError::new(EXIT_USAGE, format!("cannot read {}: {e}", p.display())))?;
        let r = SessionReport::from_json(&text)
            .map_err(|e| CliError::new(EXIT_USAGE, format!("{} is not a session report: {e}", p.display())))?;
        reports.push(r);
    }
    let ratios = compare_reports(&reports, baseline).map_err(|e| CliError::new(EXIT_USAGE, e.to_string()))?;
    for (r, ratio) in reports.iter_mut().zip(&ratios) {
        r.efficiency_ratio_vs_baseline = Some(*ratio);
    }
    match g.format {
        Format::Csv => {
            let mut csv = String::new();
            for r in &reports {
                csv.push_str(&provenance(&r.config_digest, r.seed));
            }
            csv.push_str("index,session_id,config_digest,seed,q_a,q_b,qber_x,qber_z,raw_len,final_len,secure_per_raw,ratio\n");
            for (i, r) in reports.iter().enumerate() {
                csv.push_str(&format!(
                    "{i},{},{},{},{},{},{},{},{},{},{},{}\n",
                    r.session_id,
                    r.config_digest,
                    r.seed,
                    r.q_a,
                    r.q_b,
                    r.qber_x,
                    r.qber_z,
                    r.raw_len,
                    r.final_len,
                    r.secure_per_raw,
                    r.efficiency_ratio_vs_baseline.unwrap()
                ));
            }
            out.write("compare.csv", csv.as_bytes())?;
        }
        Format::Json => {
            out.write("compare.json", serde_json::to_string_pretty(&reports).unwrap().as_bytes())?;
        }
    }
    let mut stdout = std::io::stdout().lock();
    for (i, (r, ratio)) in reports.iter().zip(&ratios).enumerate() {
        let _ = writeln!(stdout, "{i}: q_a={:.4} q_b={:.4} secure_per_raw={:.4} ratio={ratio:.3}", r.q_a, r.q_b, r.secure_per_raw);
    }
    Ok(())
}
