use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use droplock_core::dfu::{
    build_package, generate_key, parse_signing_key, parse_verifying_key, tamper_package,
    verify_package, DfuPackage, ProtectionKind, TrustPolicy,
};
use droplock_core::harvest::{run_scenario, save_pgm, Scenario, ScenarioConfig};
use droplock_core::protocol::{Frame, StreamParser};
use droplock_core::sensor::{generate_fingerprint, Resolution, UploadPolicy};
use droplock_core::sim::VirtualTime;
use droplock_core::transport::{BaudRate, BleConnectionParams};

#[derive(Parser)]
#[command(name = "droplock", version, about = "Fingerprint-harvesting smart-lock simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a named scenario and write its log and image.
    Simulate(SimulateArgs),
    /// Encode or decode sensor frames.
    #[command(subcommand)]
    Proto(ProtoCommand),
    /// Build, verify and tamper with firmware-update packages.
    #[command(subcommand)]
    Dfu(DfuCommand),
    /// Synthetic fingerprint images.
    #[command(subcommand)]
    Image(ImageCommand),
}

#[derive(Args)]
struct SimulateArgs {
    /// poc_sequence, cots_capture, overflow_115200, dfu_infection or policy_denied
    scenario: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Directory for `<scenario>.log` and `<scenario>.pgm`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// BLE connection interval, a multiple of 1250 us.
    #[arg(long)]
    ble_interval_us: Option<u64>,
    /// Notifications per connection event.
    #[arg(long)]
    ble_notifications: Option<u32>,
    /// Sensor UART rate at power-on.
    #[arg(long)]
    uart_baud: Option<u32>,
    /// Bridge ring buffer size in bytes.
    #[arg(long)]
    ring_capacity: Option<usize>,
    #[arg(long, value_enum)]
    policy: Option<PolicyArg>,
    /// Skip the 9600 baud downshift on connect.
    #[arg(long)]
    no_downshift: bool,
    /// Nobody touches the sensor.
    #[arg(long, conflicts_with = "finger_at_ms")]
    no_finger: bool,
    /// When the victim touches the sensor, in ms after the scenario starts.
    #[arg(long)]
    finger_at_ms: Option<u64>,
    /// Ask the sensor for the 80x80 image.
    #[arg(long)]
    quarter: bool,
    /// dfu_infection: the lock only accepts vendor-signed packages.
    #[arg(long)]
    require_signature: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    AllowImage,
    TemplateOnly,
    Deny,
}

#[derive(Subcommand)]
enum ProtoCommand {
    /// Read frame lines on stdin, print hex bytes.
    Encode,
    /// Read hex bytes on stdin, print one frame per line.
    Decode,
}

#[derive(Subcommand)]
enum DfuCommand {
    /// Write a new signing key (hex) and its public half to `<out>.pub`.
    Keygen {
        #[arg(short, long)]
        out: PathBuf,
    },
    Pack {
        #[arg(long)]
        fw: PathBuf,
        /// Signing key; without it the package is CRC-only.
        #[arg(long)]
        sign: Option<PathBuf>,
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long, default_value = "firmware")]
        name: String,
        #[arg(long = "fw-version", default_value = "0.0.0")]
        fw_version: String,
    },
    Verify {
        #[arg(long)]
        pkg: PathBuf,
        #[arg(long)]
        require_signature: bool,
        /// Trusted public key file; repeatable.
        #[arg(long)]
        trust: Vec<PathBuf>,
    },
    /// Overwrite firmware bytes inside a package.
    Tamper {
        #[arg(long)]
        pkg: PathBuf,
        #[arg(long)]
        offset: usize,
        /// Replacement bytes as hex.
        #[arg(long)]
        bytes: String,
        #[arg(long)]
        fixup_crc: bool,
        /// Output path; defaults to rewriting `--pkg`.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum ImageCommand {
    Gen {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, value_enum, default_value = "full")]
        resolution: ResolutionArg,
        #[arg(short, long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ResolutionArg {
    Full,
    Quarter,
}

/// Exit 1: the command ran and the answer is no.
struct Rejected;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(Rejected)) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> anyhow::Result<Result<(), Rejected>> {
    match command {
        Command::Simulate(args) => simulate(args),
        Command::Proto(ProtoCommand::Encode) => proto_encode().map(Ok),
        Command::Proto(ProtoCommand::Decode) => proto_decode().map(Ok),
        Command::Dfu(cmd) => dfu(cmd),
        Command::Image(ImageCommand::Gen { seed, resolution, out }) => {
            let res = match resolution {
                ResolutionArg::Full => Resolution::Full,
                ResolutionArg::Quarter => Resolution::Quarter,
            };
            save_pgm(&generate_fingerprint(seed, res), &out)?;
            Ok(Ok(()))
        }
    }
}

fn scenario_config(args: &SimulateArgs) -> anyhow::Result<ScenarioConfig> {
    let mut config = ScenarioConfig {
        seed: args.seed,
        ..ScenarioConfig::default()
    };
    if args.ble_interval_us.is_some() || args.ble_notifications.is_some() {
        config.ble = BleConnectionParams::new(
            args.ble_interval_us.unwrap_or(config.ble.interval_us()),
            args.ble_notifications
                .unwrap_or(config.ble.notifications_per_interval()),
        )?;
    }
    if let Some(bps) = args.uart_baud {
        config.sensor_baud = BaudRate::new(bps)?;
    }
    if let Some(capacity) = args.ring_capacity {
        if capacity == 0 {
            bail!("ring capacity must be at least one byte");
        }
        config.ring_capacity = capacity;
    }
    if let Some(policy) = args.policy {
        config.policy = match policy {
            PolicyArg::AllowImage => UploadPolicy::AllowImage,
            PolicyArg::TemplateOnly => UploadPolicy::TemplateOnly,
            PolicyArg::Deny => UploadPolicy::Deny,
        };
    }
    config.downshift = !args.no_downshift;
    if args.no_finger {
        config.finger_at = None;
    } else if let Some(ms) = args.finger_at_ms {
        config.finger_at = Some(VirtualTime::from_millis(ms));
    }
    if args.quarter {
        config.resolution = Resolution::Quarter;
    }
    config.require_signature = args.require_signature;
    Ok(config)
}

fn simulate(args: SimulateArgs) -> anyhow::Result<Result<(), Rejected>> {
    let scenario: Scenario = args.scenario.parse()?;
    let config = scenario_config(&args)?;
    let report = run_scenario(scenario, &config, args.out.as_deref())?;
    print!("{}", report.summary());
    Ok(if report.passed { Ok(()) } else { Err(Rejected) })
}

fn read_stdin() -> anyhow::Result<String> {
    let mut text = String::new();
    io::stdin().read_to_string(&mut text).context("reading stdin")?;
    Ok(text)
}

fn proto_encode() -> anyhow::Result<()> {
    let mut stdout = io::stdout().lock();
    for (n, line) in read_stdin()?.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let frame: Frame = line.parse().with_context(|| format!("line {}", n + 1))?;
        let hex: Vec<String> = frame.encode().iter().map(|b| format!("{b:02x}")).collect();
        writeln!(stdout, "{}", hex.join(" "))?;
    }
    Ok(())
}

fn proto_decode() -> anyhow::Result<()> {
    let text = read_stdin()?;
    let digits: String = text.split_whitespace().collect();
    let bytes = hex::decode(&digits).context("stdin is not hex")?;
    let mut parser = StreamParser::new();
    let mut stdout = io::stdout().lock();
    for frame in parser.push(&bytes) {
        writeln!(stdout, "{frame}")?;
    }
    let stats = parser.stats();
    if stats.bad_checksums > 0 || stats.skipped_bytes > 0 || parser.pending() > 0 {
        eprintln!(
            "{} bad checksum(s), {} byte(s) skipped, {} trailing byte(s)",
            stats.bad_checksums,
            stats.skipped_bytes,
            parser.pending()
        );
    }
    Ok(())
}

fn read_text(path: &Path) -> anyhow::Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn read_package(path: &Path) -> anyhow::Result<DfuPackage> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    DfuPackage::from_bytes(&bytes).with_context(|| path.display().to_string())
}

fn write_file(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn dfu(cmd: DfuCommand) -> anyhow::Result<Result<(), Rejected>> {
    match cmd {
        DfuCommand::Keygen { out } => {
            let key = generate_key();
            let public = out.with_extension("pub");
            write_file(&out, format!("{}\n", hex::encode(key.to_bytes())).as_bytes())?;
            write_file(
                &public,
                format!("{}\n", hex::encode(key.verifying_key().as_bytes())).as_bytes(),
            )?;
            println!("wrote {} and {}", out.display(), public.display());
        }
        DfuCommand::Pack {
            fw,
            sign,
            out,
            name,
            fw_version,
        } => {
            let firmware = fs::read(&fw).with_context(|| format!("reading {}", fw.display()))?;
            if firmware.is_empty() {
                bail!("{} is empty", fw.display());
            }
            let key = sign
                .map(|p| read_text(&p).and_then(|t| Ok(parse_signing_key(&t)?)))
                .transpose()?;
            let kind = if key.is_some() {
                ProtectionKind::Signed
            } else {
                ProtectionKind::LegacyCrc
            };
            let pkg = build_package(&firmware, kind, key.as_ref(), &name, &fw_version)?;
            write_file(&out, &pkg.to_bytes())?;
            println!("wrote {} ({} bytes firmware, {:?})", out.display(), firmware.len(), kind);
        }
        DfuCommand::Verify {
            pkg,
            require_signature,
            trust,
        } => {
            let package = read_package(&pkg)?;
            let keys = trust
                .iter()
                .map(|p| read_text(p).and_then(|t| Ok(parse_verifying_key(&t)?)))
                .collect::<anyhow::Result<Vec<_>>>()?;
            let policy = if require_signature {
                TrustPolicy::require_signature(keys)
            } else {
                TrustPolicy {
                    trusted_keys: keys,
                    ..TrustPolicy::accept_legacy()
                }
            };
            let report = verify_package(&package, &policy);
            println!("well_formed: {}", report.well_formed);
            println!("integrity_ok: {}", report.integrity_ok);
            println!("signature_present: {}", report.signature_present);
            println!("signature_valid: {}", report.signature_valid);
            println!("accepted: {}", report.accepted);
            for reason in &report.reasons {
                println!("reason: {reason}");
            }
            if !report.accepted {
                return Ok(Err(Rejected));
            }
        }
        DfuCommand::Tamper {
            pkg,
            offset,
            bytes,
            fixup_crc,
            out,
        } => {
            let package = read_package(&pkg)?;
            let patch = hex::decode(bytes.trim()).map_err(|e| anyhow!("--bytes: {e}"))?;
            let tampered = tamper_package(&package, offset, &patch, fixup_crc)?;
            let out = out.unwrap_or(pkg);
            write_file(&out, &tampered.to_bytes())?;
            println!("patched {} byte(s) at offset {offset}, wrote {}", patch.len(), out.display());
        }
    }
    Ok(Ok(()))
}
