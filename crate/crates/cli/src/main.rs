mod commands;
mod config;
mod source;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use config::{Format, Input, Mode, RunConfig};

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_IO: u8 = 2;
pub const EXIT_GATE: u8 = 3;

/// Environment variable holding the log filter, e.g. `debug` or
/// `streamseg=trace`.
const LOG_ENV: &str = "STREAMSEG_LOG";

/// Bad flags or configuration. Exits with status 1.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

/// A failed evaluation gate. Exits with status 3.
#[derive(Debug)]
pub struct GateFailure(pub String);

impl fmt::Display for GateFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for GateFailure {}

#[derive(Parser)]
#[command(name = "streamseg", version, about = "Streaming ground segmentation and clustering for spinning LiDAR")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Segment a capture, a live stream or a synthetic scene.
    Run(RunArgs),
    /// Time the pipeline stages over an offline input.
    Bench(BenchArgs),
    /// Score segmentation against the ground truth of scene specs.
    Eval(EvalArgs),
    /// Write scene specs and their packet captures.
    Synth(SynthArgs),
    /// Print decoded packets.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Run configuration file; flags override its values.
    #[arg(short, long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override a segmentation parameter, e.g. `--set t_merge=0.9`.
    #[arg(long = "set", value_name = "NAME=VALUE")]
    set: Vec<String>,
    /// Output directory. Nothing else on disk is touched.
    #[arg(short, long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Print the effective configuration and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args)]
#[group(multiple = false)]
struct InputArgs {
    /// Scene spec file or bundled scene name.
    #[arg(long, value_name = "SCENE")]
    scene: Option<String>,
    #[arg(long, value_name = "FILE")]
    pcap: Option<PathBuf>,
    /// Length-prefixed packet records.
    #[arg(long, value_name = "FILE")]
    raw: Option<PathBuf>,
    /// Address to receive sensor datagrams on, e.g. 0.0.0.0:2368.
    #[arg(long, value_name = "ADDR")]
    udp: Option<String>,
}

impl InputArgs {
    fn input(&self) -> Option<Input> {
        if let Some(s) = &self.scene {
            Some(Input::Scene(s.clone()))
        } else if let Some(p) = &self.pcap {
            Some(Input::Pcap(p.clone()))
        } else if let Some(p) = &self.raw {
            Some(Input::Raw(p.clone()))
        } else {
            self.udp.as_ref().map(|a| Input::Udp(a.clone()))
        }
    }
}

#[derive(Args)]
struct PacketArgs {
    /// Beam calibration file (channel, vertical angle, azimuth offset).
    #[arg(long, value_name = "FILE")]
    calibration: Option<PathBuf>,
    /// UDP destination port to keep when reading a pcap.
    #[arg(long)]
    port: Option<u16>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    packets: PacketArgs,
    /// Process buffers as they arrive (default).
    #[arg(long, conflicts_with = "batch")]
    stream: bool,
    /// Collect each whole scan before processing it.
    #[arg(long)]
    batch: bool,
    /// Output formats.
    #[arg(long, value_enum, value_delimiter = ',', value_name = "FORMAT,...")]
    format: Vec<Format>,
    /// Include point coordinates in cluster records.
    #[arg(long)]
    points: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    packets: PacketArgs,
    /// Passes over the input.
    #[arg(short = 'n', long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    repetitions: u64,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Scene spec files or bundled scene names. Defaults to the bundled corpus.
    #[arg(long, value_name = "SCENE")]
    scene: Vec<String>,
    /// Directory of scene spec files (*.toml).
    #[arg(long, value_name = "DIR")]
    corpus: Option<PathBuf>,
    /// Captures carry no ground truth; given only to be refused.
    #[arg(long, value_name = "FILE", hide = true)]
    pcap: Option<PathBuf>,
    #[arg(long, value_name = "FILE", hide = true)]
    raw: Option<PathBuf>,
    /// Horizontal range beyond which objects and false positives are ignored.
    #[arg(long, value_name = "METERS")]
    max_range: Option<f64>,
    #[arg(long, value_parser = unit_interval)]
    min_precision: Option<f64>,
    #[arg(long, value_parser = unit_interval)]
    min_recall: Option<f64>,
    #[arg(long, value_parser = unit_interval)]
    min_tpr: Option<f64>,
    #[arg(long, value_parser = unit_interval)]
    min_osr: Option<f64>,
    #[arg(long, value_parser = unit_interval)]
    min_usr: Option<f64>,
    #[arg(long, value_parser = unit_interval)]
    max_fnr: Option<f64>,
}

fn unit_interval(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is not a ratio in [0, 1]"))
    }
}

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum CaptureFormat {
    Pcap,
    Raw,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Scene spec files or bundled scene names. Defaults to the bundled corpus.
    #[arg(long, value_name = "SCENE")]
    scene: Vec<String>,
    /// Generate this many random street scenes instead.
    #[arg(long, value_name = "N")]
    random: Option<usize>,
    /// Seed of the first random scene.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Objects per random scene.
    #[arg(long, default_value_t = 20)]
    objects: usize,
    /// Revolutions per capture, each with fresh noise.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    scans: u32,
    /// Capture formats to write next to each scene spec.
    #[arg(long, value_enum, value_delimiter = ',', default_value = "pcap")]
    capture: Vec<CaptureFormat>,
    /// UDP destination port written into pcap frames.
    #[arg(long)]
    port: Option<u16>,
}

#[derive(Args)]
struct InspectArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    packets: PacketArgs,
    /// Stop after this many packets.
    #[arg(long)]
    limit: Option<usize>,
    /// Print every block as well.
    #[arg(long)]
    blocks: bool,
    /// One JSON object per packet.
    #[arg(long)]
    json: bool,
}

fn base_config(common: &CommonArgs) -> anyhow::Result<RunConfig> {
    let mut config = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for s in &common.set {
        config.set_param(s)?;
    }
    if let Some(dir) = &common.out {
        config.output.dir = Some(dir.clone());
    }
    Ok(config)
}

fn apply_packet_args(config: &mut RunConfig, input: &InputArgs, packets: &PacketArgs) {
    if let Some(i) = input.input() {
        config.input = Some(i);
    }
    if let Some(c) = &packets.calibration {
        config.calibration = Some(c.clone());
    }
    if let Some(p) = packets.port {
        config.port = p;
    }
}

/// Returns true when the effective config was printed instead of running.
fn print_config(common: &CommonArgs, config: &RunConfig) -> bool {
    if common.print_config {
        print!("{}", config.render());
    }
    common.print_config
}

fn run(cli: Cli, stop: Arc<AtomicBool>) -> anyhow::Result<()> {
    match cli.command {
        Command::Run(args) => {
            let mut config = base_config(&args.common)?;
            apply_packet_args(&mut config, &args.input, &args.packets);
            if args.batch {
                config.mode = Mode::Batch;
            } else if args.stream {
                config.mode = Mode::Stream;
            }
            if !args.format.is_empty() {
                config.output.formats = args.format.clone();
            }
            config.output.points |= args.points;
            config.validate()?;
            if print_config(&args.common, &config) {
                return Ok(());
            }
            commands::run(&config, &stop)
        }
        Command::Bench(args) => {
            let mut config = base_config(&args.common)?;
            apply_packet_args(&mut config, &args.input, &args.packets);
            config.mode = Mode::Bench;
            if config.input.is_none() {
                config.input = Some(Input::Scene("urban_block".into()));
            }
            config.validate()?;
            if print_config(&args.common, &config) {
                return Ok(());
            }
            commands::bench(&config, args.repetitions as usize, &stop)
        }
        Command::Eval(args) => {
            if args.pcap.is_some() || args.raw.is_some() {
                return Err(Usage("eval needs scene specs with ground truth; packet captures carry none".into()).into());
            }
            let mut config = base_config(&args.common)?;
            config.mode = Mode::Eval;
            let gates = &mut config.gates;
            for (slot, flag) in [
                (&mut gates.min_precision, args.min_precision),
                (&mut gates.min_recall, args.min_recall),
                (&mut gates.min_tpr, args.min_tpr),
                (&mut gates.min_osr, args.min_osr),
                (&mut gates.min_usr, args.min_usr),
                (&mut gates.max_fnr, args.max_fnr),
            ] {
                if flag.is_some() {
                    *slot = flag;
                }
            }
            config.validate()?;
            if print_config(&args.common, &config) {
                return Ok(());
            }
            commands::eval(&config, &args.scene, args.corpus.as_deref(), args.max_range)
        }
        Command::Synth(args) => {
            let mut config = base_config(&args.common)?;
            config.mode = Mode::Synth;
            if let Some(p) = args.port {
                config.port = p;
            }
            config.validate()?;
            if print_config(&args.common, &config) {
                return Ok(());
            }
            let plan = commands::SynthPlan {
                scenes: args.scene,
                random: args.random,
                seed: args.seed,
                objects: args.objects,
                scans: args.scans,
                capture: args.capture,
            };
            commands::synth(&config, &plan)
        }
        Command::Inspect(args) => {
            let mut config = RunConfig::default();
            apply_packet_args(&mut config, &args.input, &args.packets);
            commands::inspect(&config, args.limit, args.blocks, args.json, &stop)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_env(LOG_ENV).unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();

    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    if let Err(e) = ctrlc::set_handler(move || {
        if flag.swap(true, Ordering::SeqCst) {
            std::process::exit(130);
        }
        eprintln!("interrupted, finishing the current scan");
    }) {
        tracing::warn!("no interrupt handler: {e}");
    }

    match run(cli, stop) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.chain().any(|c| c.downcast_ref::<std::io::Error>().is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe)) => {
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = if e.is::<Usage>() {
                EXIT_USAGE
            } else if e.is::<GateFailure>() {
                EXIT_GATE
            } else {
                EXIT_IO
            };
            ExitCode::from(code)
        }
    }
}
