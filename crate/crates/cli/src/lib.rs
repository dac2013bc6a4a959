//! Command implementations behind the `friedrichs` binary.

use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use friedrichs_core::config::RunConfig;
use friedrichs_core::numeric::exp_tail;
use friedrichs_core::patches::{Occupancy, PatchSummary};
use friedrichs_core::verify::{self, nq_records, VerifyOptions, VerifyReport};
use friedrichs_core::{Error, Method, NqResult, System};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "friedrichs",
    version,
    about = "Excitation density of a bosonized Fermi gas trial state by Friedrichs diagrams"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// JSON run configuration; the built-in toy configuration when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    /// Overrides the seed of the configuration.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    /// Output file; standard output when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Lattice, patch and kernel summary with the convergence bound.
    Info,
    /// Tabulates n_q for every momentum and method of the configuration.
    Nq {
        /// Method to run (repeatable); overrides the configuration.
        #[arg(long = "method", value_name = "NAME", value_parser = parse_method)]
        methods: Vec<Method>,
        /// Maximal order of the series methods.
        #[arg(long, value_name = "N")]
        order: Option<usize>,
        /// Permits enumerations beyond the default caps.
        #[arg(long)]
        allow_large_orders: bool,
    },
    /// Runs the invariant suite.
    Verify {
        #[arg(long, hide = true)]
        sabotage_sign: bool,
    },
    /// Patch assignment of every claimed lattice point.
    ExportPatches,
}

fn parse_method(s: &str) -> Result<Method, String> {
    Method::parse(s).ok_or_else(|| {
        let names: Vec<_> = Method::ALL.iter().map(|m| m.name()).collect();
        format!("unknown method `{s}` (expected one of {})", names.join(", "))
    })
}

/// Errors a command can end with, mapped to exit codes.
#[derive(Debug)]
pub enum Failure {
    Config(Error),
    Verification(VerifyReport),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Config(e)
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Config(Error::Io(e))
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Failure::Config(Error::Io(io::Error::other(e)))
    }
}

pub fn load_config(global: &GlobalArgs) -> Result<RunConfig, Error> {
    let mut cfg = match &global.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::toy(),
    };
    if let Some(seed) = global.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

/// Runs `cli` and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match cli.global.threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build() {
            Ok(pool) => pool.install(|| dispatch(&cli)),
            Err(e) => Err(Failure::Config(Error::InvalidParameter { field: "threads", reason: e.to_string() })),
        },
        None => dispatch(&cli),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e}");
            EXIT_CONFIG
        }
        Err(Failure::Verification(report)) => {
            let failed: Vec<_> = report.checks.iter().filter(|c| !c.passed).map(|c| c.id.to_string()).collect();
            eprintln!("verification failed: checks {}", failed.join(", "));
            EXIT_VERIFY_FAILED
        }
    }
}

fn dispatch(cli: &Cli) -> Result<(), Failure> {
    let g = &cli.global;
    let mut cfg = load_config(g)?;
    match &cli.command {
        Command::Info => {
            let system = System::build(&cfg)?;
            let report = info_report(&system);
            let text = match g.format {
                Format::Json => serde_json::to_string_pretty(&report).map_err(Error::Json)? + "\n",
                Format::Csv => info_text(&report),
            };
            write_output(g.out.as_deref(), text.as_bytes())
        }
        Command::Nq { methods, order, allow_large_orders } => {
            if !methods.is_empty() {
                cfg.methods = methods.clone();
            }
            if cfg.methods.is_empty() {
                cfg.methods = Method::ALL.to_vec();
            }
            if order.is_some() {
                cfg.n_max = *order;
            }
            cfg.allow_large_orders |= allow_large_orders;
            cfg.validate()?;
            let system = System::build(&cfg)?;
            let records = nq_records(&system, &cfg.methods)?;
            let bytes = match g.format {
                Format::Json => nq_json(&records)?,
                Format::Csv => nq_csv(&records)?,
            };
            let out = g.out.clone().or_else(|| cfg.output.clone());
            write_output(out.as_deref(), &bytes)
        }
        Command::Verify { sabotage_sign } => {
            let report = verify::run_all(&cfg, VerifyOptions { sabotage_sign: *sabotage_sign })?;
            let text = match g.format {
                Format::Json => serde_json::to_string_pretty(&report).map_err(Error::Json)? + "\n",
                Format::Csv => verify_text(&report),
            };
            write_output(g.out.as_deref(), text.as_bytes())?;
            if report.all_passed() {
                Ok(())
            } else {
                Err(Failure::Verification(report))
            }
        }
        Command::ExportPatches => {
            let system = System::build(&cfg)?;
            let bytes = match g.format {
                Format::Json => {
                    let summary = system.context.scheme.summary(&system.context.sys);
                    (serde_json::to_string_pretty(&summary).map_err(Error::Json)? + "\n").into_bytes()
                }
                Format::Csv => patches_csv(&system)?,
            };
            write_output(g.out.as_deref(), &bytes)
        }
    }
}

fn write_output(path: Option<&Path>, bytes: &[u8]) -> Result<(), Failure> {
    match path {
        Some(p) => {
            let mut f = File::create(p)?;
            f.write_all(bytes)?;
            f.flush()?;
        }
        None => {
            let mut out = io::stdout().lock();
            out.write_all(bytes)?;
            out.flush()?;
        }
    }
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct InfoReport {
    pub particle_count: usize,
    pub hbar: f64,
    pub kappa: f64,
    pub transfer_count: usize,
    pub transfers: Vec<friedrichs_core::Momentum>,
    pub patches: PatchSummary,
    pub s_norm_bound: f64,
    /// `e^B`, which bounds the sum of all terms of the series in absolute value.
    pub convergence_envelope: f64,
}

pub fn info_report(system: &System) -> InfoReport {
    let ctx = &system.context;
    let b = ctx.s_norm_bound();
    InfoReport {
        particle_count: ctx.sys.particle_count,
        hbar: ctx.sys.hbar,
        kappa: ctx.sys.kappa,
        transfer_count: ctx.sys.transfer_set().len(),
        transfers: ctx.sys.transfer_set(),
        patches: ctx.scheme.summary(&ctx.sys),
        s_norm_bound: b,
        convergence_envelope: b.exp(),
    }
}

fn info_text(r: &InfoReport) -> String {
    let mut s = String::new();
    s += &format!(
        "N = {}\nhbar = {}\nkappa = {}\n|Gamma_nor| = {}\n",
        r.particle_count, r.hbar, r.kappa, r.transfer_count
    );
    s += &format!("patches: M = {}, threshold = {}\n", r.patches.m, r.patches.threshold);
    for p in &r.patches.patches {
        s += &format!("  {}: {} holes, {} particles\n", p.id, p.holes, p.particles);
    }
    for t in &r.patches.transfers {
        let counts: Vec<String> = t.pair_counts.iter().map(|c| format!("{}:{}", c.alpha, c.n_squared)).collect();
        s += &format!("  k = {}: n^2 = [{}]\n", t.k, counts.join(", "));
    }
    s += &format!("s_norm_bound = {}\nenvelope e^B = {}\n", r.s_norm_bound, r.convergence_envelope);
    s += &format!("tail after order 4 = {}\n", exp_tail(r.s_norm_bound, 4));
    s
}

fn verify_text(r: &VerifyReport) -> String {
    r.checks
        .iter()
        .map(|c| {
            format!(
                "{} {:>2} {}: {} ({:.2} s)\n",
                if c.passed { "PASS" } else { "FAIL" },
                c.id,
                c.name,
                c.detail,
                c.seconds
            )
        })
        .collect()
}

pub fn nq_json(records: &[NqResult]) -> Result<Vec<u8>, Failure> {
    let mut s = serde_json::to_string_pretty(records).map_err(Error::Json)?;
    s.push('\n');
    Ok(s.into_bytes())
}

#[derive(Serialize)]
struct CsvRow<'a> {
    qx: i32,
    qy: i32,
    qz: i32,
    side: &'a str,
    method: &'a str,
    n_max: Option<usize>,
    value: f64,
}

pub fn nq_csv(records: &[NqResult]) -> Result<Vec<u8>, Failure> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        let side = match r.side {
            friedrichs_core::QSide::Outside => "outside",
            friedrichs_core::QSide::Inside => "inside",
        };
        w.serialize(CsvRow {
            qx: r.q.x,
            qy: r.q.y,
            qz: r.q.z,
            side,
            method: r.method.name(),
            n_max: r.n_max,
            value: r.value,
        })?;
    }
    w.into_inner().map_err(|e| Failure::Config(Error::Io(io::Error::other(e.to_string()))))
}

fn patches_csv(system: &System) -> Result<Vec<u8>, Failure> {
    let scheme = &system.context.scheme;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["qx", "qy", "qz", "patch", "role"])?;
    for q in scheme.claimed() {
        let alpha = scheme.patch_of(q).expect("claimed point has a patch");
        let role = if scheme.is_hole_in(q, alpha) { Occupancy::Hole } else { Occupancy::Particle };
        let role = match role {
            Occupancy::Hole => "hole",
            Occupancy::Particle => "particle",
        };
        w.write_record([q.x.to_string(), q.y.to_string(), q.z.to_string(), alpha.to_string(), role.to_string()])?;
    }
    w.into_inner().map_err(|e| Failure::Config(Error::Io(io::Error::other(e.to_string()))))
}
