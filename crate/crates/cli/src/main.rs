use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use fipac_core::artifact::{ArtifactFiles, ArtifactPaths, LoadedArtifact};
use fipac_core::experiments::{bundled_campaign, collision_table, detection_campaign, CampaignConfig, BUNDLED_CAMPAIGNS};
use fipac_core::hexfmt::parse_word;
use fipac_core::instrument::{CheckPolicy, Mode};
use fipac_core::ir::parse_program;
use fipac_core::pac::{test_vectors, PacConfig, PacKey};
use fipac_core::postprocess::{build, BuildConfig, DEFAULT_BASE_ADDRESS};
use fipac_core::sim::{execute, resolve_faults, ExecConfig, FaultFile, Verdict, DEFAULT_FUEL};

const EXIT_TRAP: u8 = 17;
const EXIT_CRASH: u8 = 18;
const EXIT_FUEL: u8 = 19;

#[derive(Parser)]
#[command(name = "fipac", version, about = "Keyed control-flow integrity toolchain and simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct KeyArg {
    /// 128-bit key as 32 hex digits.
    #[arg(long, env = "FIPAC_KEY", hide_env_values = true)]
    key: String,
}

impl KeyArg {
    fn parse(&self) -> Result<PacKey> {
        self.key.parse().context("invalid key")
    }
}

#[derive(Subcommand)]
enum Command {
    /// Instrument and post-process an IR program.
    Build {
        input: PathBuf,
        /// Instrumented program path; sidecar and manifest are written next to it.
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, default_value = "func-end")]
        policy: CheckPolicy,
        #[arg(long, default_value = "fipac")]
        mode: Mode,
        #[command(flatten)]
        key: KeyArg,
        #[arg(long, default_value = "0", value_parser = word)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_BASE_ADDRESS, value_parser = word)]
        base_address: u64,
        #[arg(long, default_value_t = 16)]
        pac_bits: u32,
    },
    /// Execute a built artifact and print the result as JSON.
    Run {
        /// Instrumented program written by `build`.
        artifact: PathBuf,
        #[command(flatten)]
        key: KeyArg,
        /// Initial data memory, comma separated.
        #[arg(long, value_delimiter = ',', value_parser = word)]
        input: Vec<u64>,
        /// JSON file with one fault or a list of faults.
        #[arg(long)]
        fault: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_FUEL)]
        fuel: u64,
        #[arg(long)]
        trace: bool,
    },
    /// Run a fault-injection campaign and print its report.
    Campaign {
        /// Campaign JSON file or the name of a bundled campaign.
        config: String,
        #[arg(long)]
        trials: Option<u64>,
        #[arg(long)]
        csv: bool,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Print the collision probability table as CSV.
    Collide {
        #[arg(long, default_value_t = 16)]
        pac_bits: u32,
        #[arg(long, value_delimiter = ',', required = true)]
        updates: Vec<u64>,
        /// Add Monte-Carlo estimates.
        #[arg(long)]
        empirical: bool,
        #[arg(long, default_value_t = 10_000)]
        trials: u64,
        #[arg(long, default_value = "0", value_parser = word)]
        seed: u64,
        /// `dat` prints whitespace-separated columns without a header.
        #[arg(long, default_value = "csv", value_parser = ["csv", "dat"])]
        format: String,
    },
    /// Emit PAC conformance vectors as JSON lines.
    Vectors {
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value = "0", value_parser = word)]
        seed: u64,
        #[arg(long, default_value_t = 16)]
        pac_bits: u32,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
}

fn word(s: &str) -> Result<u64, String> {
    parse_word(s).ok_or_else(|| format!("`{s}` is not a 64-bit word"))
}

fn emit(output: Option<&Path>, text: &str) -> Result<()> {
    match output {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => std::io::stdout().write_all(text.as_bytes()).context("writing stdout"),
    }
}

fn load_campaign(arg: &str) -> Result<CampaignConfig> {
    if let Some(c) = bundled_campaign(arg) {
        return Ok(c);
    }
    let text = fs::read_to_string(arg).with_context(|| {
        format!("`{arg}` is neither a file nor a bundled campaign ({})", BUNDLED_CAMPAIGNS.join(", "))
    })?;
    serde_json::from_str(&text).with_context(|| format!("parsing {arg}"))
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Build { input, output, policy, mode, key, seed, base_address, pac_bits } => {
            let text = fs::read_to_string(&input).with_context(|| format!("reading {}", input.display()))?;
            let source = parse_program(&text).with_context(|| format!("parsing {}", input.display()))?;
            let config = BuildConfig::new(mode, policy, key.parse()?)
                .with_seed(seed)
                .with_base(base_address)
                .with_pac(PacConfig::with_pac_bits(pac_bits)?);
            let b = build(&source, config)?;
            let paths = ArtifactPaths::for_program(&output);
            if paths.all().contains(&input.as_path()) {
                bail!("output would overwrite the input");
            }
            let files = ArtifactFiles::from_build(&b);
            files.write(&paths)?;
            let summary = serde_json::json!({
                "program": paths.program,
                "sidecar": paths.sidecar,
                "manifest": paths.manifest,
                "hash": files.hash(),
            });
            emit(None, &(serde_json::to_string_pretty(&summary)? + "\n"))?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Run { artifact, key, input, fault, fuel, trace } => {
            let loaded = LoadedArtifact::load(&ArtifactPaths::for_program(&artifact))?;
            let img = loaded.image(key.parse()?)?;
            let faults = match fault {
                Some(path) => {
                    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
                    let file: FaultFile =
                        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
                    resolve_faults(&loaded.program, &file.into_specs())?
                }
                None => Vec::new(),
            };
            let cfg = ExecConfig { fuel, trace, ..ExecConfig::default() };
            let r = execute(&img, &input, &faults, &cfg);
            emit(None, &(serde_json::to_string_pretty(&r)? + "\n"))?;
            Ok(match r.verdict {
                Verdict::Completed => ExitCode::SUCCESS,
                Verdict::CfiTrap { .. } => ExitCode::from(EXIT_TRAP),
                Verdict::Crash { .. } => ExitCode::from(EXIT_CRASH),
                Verdict::FuelExhausted => ExitCode::from(EXIT_FUEL),
            })
        }
        Command::Campaign { config, trials, csv, output } => {
            let mut cfg = load_campaign(&config)?;
            if let Some(t) = trials {
                cfg.trials = t;
            }
            let report = detection_campaign(&cfg)?;
            let text = if csv { report.to_csv() } else { serde_json::to_string_pretty(&report)? + "\n" };
            emit(output.as_deref(), &text)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Collide { pac_bits, updates, empirical, trials, seed, format } => {
            PacConfig::with_pac_bits(pac_bits)?;
            let rows = collision_table(pac_bits, &updates, empirical.then_some((trials, seed)))?;
            let (sep, header) = match format.as_str() {
                "dat" => (" ", ""),
                _ if empirical => (",", "updates,analytic,empirical,sigma\n"),
                _ => (",", "updates,analytic\n"),
            };
            let mut out = String::from(header);
            for r in rows {
                let mut cols = vec![r.updates.to_string(), format!("{:.6}", r.analytic)];
                if let (Some(e), Some(s)) = (r.empirical, r.sigma) {
                    cols.extend([format!("{e:.6}"), format!("{s:.6}")]);
                }
                out += &cols.join(sep);
                out.push('\n');
            }
            emit(None, &out)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Vectors { count, seed, pac_bits, output } => {
            let mut out = String::new();
            for v in test_vectors(count, seed, PacConfig::with_pac_bits(pac_bits)?) {
                out += &serde_json::to_string(&v)?;
                out.push('\n');
            }
            emit(output.as_deref(), &out)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
