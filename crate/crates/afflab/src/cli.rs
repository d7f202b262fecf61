//! Command-line front end: system loading, subcommands, deterministic run
//! manifests, CSV/JSON emission.
//!
//! Exit codes: 0 success, 2 input error, 3 budget exhaustion (partial
//! artifacts are still written). All randomness is seeded and the seed is
//! recorded in the manifest; repeated runs with equal manifests produce
//! byte-identical artifact bodies. Wall-clock timings are emitted only with
//! `--timings` so that default artifacts stay reproducible.

use crate::dimension::{
    box_counting, chaos_game_sample, dimension_report, ldim_curve,
    DimensionError, IndexDistribution,
};
use crate::measures::equilibrium_approx;
use crate::potentials::certificate_search;
use crate::pressure::{
    enumeration_cost, pressure_bracket, suggested_depth, theta_estimate, EngineOptions,
    PressureError, QmCertificateRef, DEFAULT_BUDGET,
};
use crate::reducibility::detriangularise;
use crate::systems::{self, SystemSpec};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Parser)]
#[command(name = "afflab", version, about = "Thermodynamic formalism for affine iterated function systems")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
    /// System description file (JSON).
    #[arg(long, global = true)]
    system: Option<PathBuf>,
    /// Singular-value exponent s.
    #[arg(long, global = true)]
    s: Option<f64>,
    /// Word length / level.
    #[arg(long, global = true)]
    n: Option<usize>,
    /// Truncation size for countable systems.
    #[arg(long, global = true)]
    trunc: Option<usize>,
    /// Target tolerance.
    #[arg(long, global = true)]
    tol: Option<f64>,
    /// RNG seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker thread cap.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Word-evaluation budget (also via AFFLAB_BUDGET).
    #[arg(long, global = true)]
    budget: Option<f64>,
    /// Artifact output path (stdout when absent).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value = "csv")]
    format: Format,
    /// Emit wall-clock columns (off by default to keep artifacts
    /// byte-reproducible).
    #[arg(long, global = true)]
    timings: bool,
    /// Quasi-multiplicativity certificate (JSON) to sharpen lower bounds.
    #[arg(long, global = true)]
    certificate: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Singular value function φ^s per map.
    Phi,
    /// Certified pressure bracket at s.
    Pressure,
    /// Finiteness threshold interval.
    Theta,
    /// Affinity dimension report.
    Dim,
    /// Lower-dimension curve over truncations.
    Ldim {
        /// Comma-separated truncation schedule, e.g. 10,100,1000.
        #[arg(long)]
        schedule: Option<String>,
    },
    /// Block-triangularization of a finite system.
    Blocks,
    /// Level-n equilibrium approximation diagnostics.
    Equilibrium {
        /// Also stream the cylinder weights.
        #[arg(long)]
        weights: bool,
    },
    /// Chaos-game attractor sample.
    Sample {
        #[arg(long, default_value_t = 10_000)]
        count: usize,
    },
    /// Box-counting estimate from a chaos-game sample.
    Boxdim {
        #[arg(long, default_value_t = 20_000)]
        count: usize,
        /// Comma-separated scales; default spans a decade.
        #[arg(long)]
        scales: Option<String>,
    },
    /// Built-in example families.
    Examples {
        #[arg(default_value = "list")]
        action: String,
    },
    /// Search for a quasi-multiplicativity certificate at s.
    Certify {
        /// Maximum connecting-word length.
        #[arg(long, default_value_t = 2)]
        flen: usize,
    },
}

struct CliError {
    code: i32,
    message: String,
}

impl CliError {
    fn input(msg: impl Into<String>) -> Self {
        CliError { code: 2, message: msg.into() }
    }
    fn budget(msg: impl Into<String>) -> Self {
        CliError { code: 3, message: msg.into() }
    }
}

impl From<systems::SystemError> for CliError {
    fn from(e: systems::SystemError) -> Self {
        CliError::input(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::input(e.to_string())
    }
}

impl From<PressureError> for CliError {
    fn from(e: PressureError) -> Self {
        match e {
            PressureError::Budget { .. } => CliError::budget(e.to_string()),
            _ => CliError::input(e.to_string()),
        }
    }
}

impl From<DimensionError> for CliError {
    fn from(e: DimensionError) -> Self {
        match e {
            DimensionError::Pressure(p) => p.into(),
            other => CliError::input(other.to_string()),
        }
    }
}

#[derive(Serialize)]
struct RunManifest {
    tool: String,
    version: String,
    subcommand: String,
    input_sha256: Option<String>,
    params: BTreeMap<String, String>,
    seed: u64,
    threads: Option<usize>,
    budget: f64,
    budget_consumed: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    wall_ms: Option<u128>,
}

/// Entry point; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            // clap prints its own usage/help text; keep its exit code
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let threads = cli.threads;
    let body = || match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    };
    match threads {
        Some(t) => match rayon::ThreadPoolBuilder::new().num_threads(t).build() {
            Ok(pool) => pool.install(body),
            Err(e) => {
                eprintln!("error: {e}");
                2
            }
        },
        None => body(),
    }
}

fn load_system(cli: &Cli) -> Result<(SystemSpec, Option<String>), CliError> {
    let path = cli
        .system
        .as_ref()
        .ok_or_else(|| CliError::input("--system <path> is required for this subcommand"))?;
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    let hash = format!("{:x}", Sha256::digest(text.as_bytes()));
    Ok((systems::from_json(&text)?, Some(hash)))
}

fn budget_of(cli: &Cli) -> f64 {
    cli.budget
        .or_else(|| std::env::var("AFFLAB_BUDGET").ok().and_then(|v| v.parse().ok()))
        .unwrap_or(DEFAULT_BUDGET)
}

fn opts_of(cli: &Cli) -> EngineOptions {
    EngineOptions { budget: budget_of(cli), ..EngineOptions::default() }
}

fn load_certificate(cli: &Cli) -> Result<Option<QmCertificateRef>, CliError> {
    match &cli.certificate {
        None => Ok(None),
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
            let cert = crate::potentials::QMCertificate::from_json(&text)
                .map_err(|e| CliError::input(format!("bad certificate: {e}")))?;
            Ok(Some(cert.as_pressure_ref(&path.display().to_string())))
        }
    }
}

fn emit(out: Option<&Path>, body: &str) -> Result<(), CliError> {
    match out {
        Some(p) => std::fs::write(p, body)?,
        None => print!("{body}"),
    }
    Ok(())
}

fn write_manifest(cli: &Cli, manifest: &RunManifest) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    match &cli.out {
        Some(p) => {
            let mut mp = p.as_os_str().to_owned();
            mp.push(".manifest.json");
            std::fs::write(PathBuf::from(mp), text)?;
        }
        None => eprintln!("{text}"),
    }
    Ok(())
}

fn manifest_base(cli: &Cli, sub: &str, hash: Option<String>) -> RunManifest {
    let mut params = BTreeMap::new();
    let mut put = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            params.insert(k.to_string(), v);
        }
    };
    put("s", cli.s.map(|v| v.to_string()));
    put("n", cli.n.map(|v| v.to_string()));
    put("trunc", cli.trunc.map(|v| v.to_string()));
    put("tol", cli.tol.map(|v| v.to_string()));
    put("format", Some(format!("{:?}", cli.format).to_lowercase()));
    RunManifest {
        tool: "afflab".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        subcommand: sub.into(),
        input_sha256: hash,
        params,
        seed: cli.seed.unwrap_or(0),
        threads: cli.threads,
        budget: budget_of(cli),
        budget_consumed: None,
        wall_ms: None,
    }
}

fn require_s(cli: &Cli) -> Result<f64, CliError> {
    cli.s.ok_or_else(|| CliError::input("--s <real> is required for this subcommand"))
}

fn parse_usize_list(text: &str) -> Result<Vec<usize>, CliError> {
    text.split(',')
        .map(|t| t.trim().parse::<usize>().map_err(|e| CliError::input(format!("bad schedule entry {t:?}: {e}"))))
        .collect()
}

fn parse_f64_list(text: &str) -> Result<Vec<f64>, CliError> {
    text.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| CliError::input(format!("bad scale {t:?}: {e}"))))
        .collect()
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    let started = Instant::now();
    match &cli.command {
        Command::Examples { action } => {
            if action != "list" {
                return Err(CliError::input(format!("unknown examples action {action:?}")));
            }
            let mut body = String::new();
            for (name, schema) in systems::builtin_families() {
                let _ = writeln!(body, "{name}  {schema}");
            }
            emit(cli.out.as_deref(), &body)?;
            Ok(())
        }
        Command::Phi => {
            let (sys, hash) = load_system(cli)?;
            let s = require_s(cli)?;
            let trunc = cli.trunc.unwrap_or(100);
            let maps = sys.materialize(trunc);
            let mut body = String::new();
            match cli.format {
                Format::Csv => {
                    let _ = writeln!(body, "index,s,phi_lower,phi_upper");
                    for (i, m) in maps.iter().enumerate() {
                        let lp = crate::linalg::ScaledMatrix::from_matrix(&m.linear)
                            .log_phi_s(s)
                            .map_err(|e| CliError::input(e.to_string()))?;
                        let v = lp.exp();
                        let slack = 1e-12 * v;
                        let _ = writeln!(body, "{i},{s},{},{}", v - slack, v + slack);
                    }
                }
                Format::Json => {
                    let vals: Vec<serde_json::Value> = maps
                        .iter()
                        .enumerate()
                        .map(|(i, m)| {
                            let v = crate::linalg::ScaledMatrix::from_matrix(&m.linear)
                                .log_phi_s(s)
                                .map(|l| l.exp())
                                .unwrap_or(f64::NAN);
                            serde_json::json!({"index": i, "s": s, "phi": v})
                        })
                        .collect();
                    body = serde_json::to_string_pretty(&vals).unwrap();
                    body.push('\n');
                }
            }
            emit(cli.out.as_deref(), &body)?;
            finish(cli, started, "phi", hash, None)
        }
        Command::Pressure => {
            let (sys, hash) = load_system(cli)?;
            let s = require_s(cli)?;
            let trunc = cli.trunc.unwrap_or(100);
            let opts = opts_of(cli);
            let k = sys.alphabet_len(trunc).max(1);
            let n = cli.n.unwrap_or_else(|| suggested_depth(k, opts.budget).clamp(1, 12));
            let cert = load_certificate(cli)?;
            let result = pressure_bracket(&sys, s, n, trunc, cert.as_ref(), &opts)?;
            let mut body = String::new();
            let header: String = if cli.timings {
                "s,n,N,upper,lower_certified,lower_heuristic,tail_term,wall_ms".into()
            } else {
                "s,n,N,upper,lower_certified,lower_heuristic,tail_term".into()
            };
            let achieved = match result {
                Ok(b) => {
                    let lc = b
                        .lower_certified
                        .map(|v| v.to_string())
                        .unwrap_or_else(|| "nan".into());
                    match cli.format {
                        Format::Csv => {
                            let _ = writeln!(body, "{header}");
                            let _ = write!(
                                body,
                                "{},{},{},{},{},{},{}",
                                b.s,
                                b.n,
                                b.trunc.unwrap_or(0),
                                b.upper,
                                lc,
                                b.lower_heuristic,
                                b.tail_term
                            );
                            if cli.timings {
                                let _ = write!(body, ",{}", started.elapsed().as_millis());
                            }
                            body.push('\n');
                        }
                        Format::Json => {
                            body = serde_json::to_string_pretty(&serde_json::json!({
                                "s": b.s, "n": b.n, "N": b.trunc,
                                "upper": b.upper,
                                "lower_certified": b.lower_certified,
                                "lower_heuristic": b.lower_heuristic,
                                "tail_term": b.tail_term,
                                "oracle_used": b.oracle_used,
                                "underflow_words": b.underflow_words,
                            }))
                            .unwrap();
                            body.push('\n');
                        }
                    }
                    emit(cli.out.as_deref(), &body)?;
                    b.n
                }
                Err(witness) => {
                    println!("+inf (s below theta)");
                    match cli.format {
                        Format::Csv => {
                            let _ = writeln!(body, "{header}");
                            let _ = writeln!(
                                body,
                                "{s},{n},{trunc},inf,inf,inf,0{}",
                                if cli.timings { ",0" } else { "" }
                            );
                        }
                        Format::Json => {
                            body = serde_json::to_string_pretty(&serde_json::json!({
                                "s": s,
                                "pressure": "+inf",
                                "witness_log_index": witness.log_index,
                                "witness_certified_sum": witness.certified_sum,
                            }))
                            .unwrap();
                            body.push('\n');
                        }
                    }
                    if cli.out.is_some() {
                        emit(cli.out.as_deref(), &body)?;
                    }
                    n.min(suggested_depth(k, opts.budget)).max(1)
                }
            };
            let consumed = enumeration_cost(k, achieved);
            finish(cli, started, "pressure", hash, Some(consumed))
        }
        Command::Theta => {
            let (sys, hash) = load_system(cli)?;
            let tol = cli.tol.unwrap_or(1e-2);
            let (lo, hi) = theta_estimate(&sys, tol)?;
            let body = match cli.format {
                Format::Csv => format!("theta_lower,theta_upper\n{lo},{hi}\n"),
                Format::Json => format!(
                    "{}\n",
                    serde_json::json!({"theta_lower": lo, "theta_upper": hi})
                ),
            };
            emit(cli.out.as_deref(), &body)?;
            finish(cli, started, "theta", hash, None)
        }
        Command::Dim => {
            let (sys, hash) = load_system(cli)?;
            let tol = cli.tol.unwrap_or(1e-4);
            let trunc = cli.trunc.unwrap_or(100);
            let opts = opts_of(cli);
            let schedule = default_schedule(trunc);
            let report = dimension_report(&sys, tol, trunc, &schedule, &opts)?;
            let body = match cli.format {
                Format::Csv => {
                    let mut b = String::from(
                        "udim_lower,udim_upper,theta_lower,theta_upper,dim_aff,may_not_exist\n",
                    );
                    let _ = writeln!(
                        b,
                        "{},{},{},{},{},{}",
                        report.udim_bracket.0,
                        report.udim_bracket.1,
                        report.theta_interval.0,
                        report.theta_interval.1,
                        report.dim_aff.map(|v| v.to_string()).unwrap_or_else(|| "nan".into()),
                        report.dim_aff_may_not_exist
                    );
                    b
                }
                Format::Json => format!(
                    "{}\n",
                    serde_json::to_string_pretty(&serde_json::json!({
                        "udim_bracket": report.udim_bracket,
                        "theta_interval": report.theta_interval,
                        "ldim_curve": report.ldim_curve,
                        "dim_aff": report.dim_aff,
                        "dim_aff_may_not_exist": report.dim_aff_may_not_exist,
                        "note": report.note,
                    }))
                    .unwrap()
                ),
            };
            emit(cli.out.as_deref(), &body)?;
            if cli.out.is_some() {
                println!(
                    "dim_aff in [{}, {}]{}",
                    report.udim_bracket.0,
                    report.udim_bracket.1,
                    if report.dim_aff_may_not_exist {
                        " (may not exist: udim bracket overlaps theta)"
                    } else {
                        ""
                    }
                );
            }
            finish(cli, started, "dim", hash, None)
        }
        Command::Ldim { schedule } => {
            let (sys, hash) = load_system(cli)?;
            let tol = cli.tol.unwrap_or(1e-4);
            let opts = opts_of(cli);
            let sched = match schedule {
                Some(t) => parse_usize_list(t)?,
                None => default_schedule(cli.trunc.unwrap_or(1000)),
            };
            let curve = ldim_curve(&sys, &sched, tol, &opts)?;
            let body = match cli.format {
                Format::Csv => {
                    let mut b = String::from("N,ldim\n");
                    for (n, v) in &curve {
                        let _ = writeln!(b, "{n},{v}");
                    }
                    b
                }
                Format::Json => format!("{}\n", serde_json::to_string_pretty(&curve).unwrap()),
            };
            emit(cli.out.as_deref(), &body)?;
            finish(cli, started, "ldim", hash, None)
        }
        Command::Blocks => {
            let (sys, hash) = load_system(cli)?;
            let tol = cli.tol.unwrap_or(1e-8);
            let bs = detriangularise(&sys, 32, tol, cli.seed.unwrap_or(0))
                .map_err(|e| CliError::input(e.to_string()))?;
            let body = format!(
                "{}\n",
                serde_json::to_string_pretty(&serde_json::json!({
                    "block_dims": bs.block_dims,
                    "irreducible_flags": bs.irreducible_flags,
                    "conjugator": bs.conjugator.rows(),
                    "conjugator_cond": bs.conjugator_cond,
                    "ill_conditioned": bs.ill_conditioned,
                    "completely_reducible": bs.completely_reducible,
                    "trials": bs.trials,
                    "tol": bs.tol,
                }))
                .unwrap()
            );
            emit(cli.out.as_deref(), &body)?;
            finish(cli, started, "blocks", hash, None)
        }
        Command::Equilibrium { weights } => {
            let (sys, hash) = load_system(cli)?;
            let s = require_s(cli)?;
            let n = cli.n.unwrap_or(8);
            let opts = opts_of(cli);
            let bracket = pressure_bracket(&sys, s, (n + 2).min(14), 0, None, &opts)?
                .map_err(|_| CliError::input("pressure is +inf at this s"))?;
            let approx = equilibrium_approx(&sys, s, n, &bracket)
                .map_err(|e| CliError::input(e.to_string()))?;
            let mut j = serde_json::json!({
                "s": approx.s,
                "n": approx.n,
                "p_hat": approx.p_hat,
                "bracket_width": approx.bracket_width,
                "gibbs_c_hat": approx.gibbs_c_hat,
                "gibbs_c_hat_range": approx.gibbs_c_hat_range,
                "level_ratios": approx.level_ratios,
                "triple_violations": approx.triple_violations,
                "reducible_warning": approx.reducible_warning,
            });
            if *weights {
                j["log_weights"] = serde_json::json!(approx.log_weights);
            }
            emit(cli.out.as_deref(), &format!("{}\n", serde_json::to_string_pretty(&j).unwrap()))?;
            finish(cli, started, "equilibrium", hash, None)
        }
        Command::Sample { count } => {
            let (sys, hash) = load_system(cli)?;
            let seed = cli.seed.unwrap_or(0);
            let trunc = cli.trunc.unwrap_or(100);
            let dist = match cli.s {
                Some(s) if !sys.is_finite() => IndexDistribution::PhiS(s),
                _ => IndexDistribution::Uniform,
            };
            let pts = chaos_game_sample(&sys, *count, seed, trunc, &dist)?;
            let mut body = String::new();
            for p in &pts {
                let row: Vec<String> = p.iter().map(|x| x.to_string()).collect();
                let _ = writeln!(body, "{}", row.join(","));
            }
            emit(cli.out.as_deref(), &body)?;
            finish(cli, started, "sample", hash, None)
        }
        Command::Boxdim { count, scales } => {
            let (sys, hash) = load_system(cli)?;
            let seed = cli.seed.unwrap_or(0);
            let trunc = cli.trunc.unwrap_or(100);
            let pts = chaos_game_sample(&sys, *count, seed, trunc, &IndexDistribution::Uniform)?;
            let sc = match scales {
                Some(t) => parse_f64_list(t)?,
                None => vec![0.2, 0.1, 0.05, 0.03, 0.02],
            };
            let bc = box_counting(&pts, &sc)?;
            let body = match cli.format {
                Format::Csv => {
                    let mut b = String::from("scale,boxes\n");
                    for (e, c) in &bc.counts {
                        let _ = writeln!(b, "{e},{c}");
                    }
                    let _ = writeln!(b, "estimate,{}", bc.estimate);
                    b
                }
                Format::Json => format!(
                    "{}\n",
                    serde_json::json!({"estimate": bc.estimate, "counts": bc.counts})
                ),
            };
            emit(cli.out.as_deref(), &body)?;
            finish(cli, started, "boxdim", hash, None)
        }
        Command::Certify { flen } => {
            let (sys, hash) = load_system(cli)?;
            let s = require_s(cli)?;
            let checked = cli.n.unwrap_or(3);
            match certificate_search(&sys, s, *flen, checked)
                .map_err(|e| CliError::input(e.to_string()))?
            {
                Some(cert) => {
                    emit(cli.out.as_deref(), &format!("{}\n", cert.to_json()))?;
                }
                None => {
                    println!("no certificate found (ratio degenerates)");
                }
            }
            finish(cli, started, "certify", hash, None)
        }
    }
}

fn default_schedule(max: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut n = 10usize;
    while n < max {
        out.push(n);
        n *= 10;
    }
    if out.last() != Some(&max) && max >= 2 {
        out.push(max);
    }
    if out.is_empty() {
        out.push(max.max(2));
    }
    out
}

fn finish(
    cli: &Cli,
    started: Instant,
    sub: &str,
    hash: Option<String>,
    consumed: Option<f64>,
) -> Result<(), CliError> {
    let mut manifest = manifest_base(cli, sub, hash);
    manifest.budget_consumed = consumed;
    if cli.timings {
        manifest.wall_ms = Some(started.elapsed().as_millis());
    }
    write_manifest(cli, &manifest)
}

/// Convenience wrapper used by the binary.
pub fn main_from_env() -> i32 {
    run(std::env::args())
}
