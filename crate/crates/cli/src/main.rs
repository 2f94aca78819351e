use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use flapesc::engine::MIN_BAND_MM;
use flapesc::units::normalized_to_command;
use flapesc::{
    acceptance_band, detect_convergence, load_scenario, measure_dither_ripple, read_log,
    run_scenario, spectrum_peak, write_log, ConfigError, ConvergenceReport, Mode, SimConfig,
    SimError, Simulation, SpectrumError, Target, TelemetryError, TelemetryFrame,
};
use flapesc_bridge::{BridgeConfig, BridgeError, Server};
use std::net::{IpAddr, SocketAddr};
use std::path::PathBuf;
use std::process::ExitCode;

/// Hold time (s) a run must stay in band to count as converged.
const HOLD_S: f64 = 10.0;

#[derive(Parser)]
#[command(
    name = "flapesc",
    version,
    about = "Extremum-seeking flapping-wing hover simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario headless and report convergence.
    Run {
        /// Scenario file or built-in name (scenario_a, scenario_b, scenario_c, scenario_n, free_fall).
        #[arg(long)]
        scenario: String,
        #[arg(long)]
        seed: Option<u64>,
        /// Override the run length (s).
        #[arg(long, allow_negative_numbers = true)]
        duration: Option<f64>,
        /// Write the full telemetry log here (CSV).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Convergence report and J spectrum of a telemetry log.
    Analyze {
        #[arg(long)]
        log: PathBuf,
        /// Altitude target in mm; defaults to the logged z_src column.
        #[arg(long, allow_negative_numbers = true)]
        target: Option<f64>,
        #[arg(long, default_value_t = MIN_BAND_MM)]
        band: f64,
        #[arg(long, default_value_t = HOLD_S)]
        hold: f64,
        /// Lowest frequency (Hz) considered for the spectral peak.
        #[arg(long, default_value_t = 10.0)]
        f_min: f64,
    },
    /// Serve a live run to the operator console over WebSocket.
    Serve {
        #[arg(long)]
        scenario: String,
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
        #[arg(long, default_value_t = 8765)]
        port: u16,
        /// Frames per simulated second sent to clients.
        #[arg(long, default_value_t = 50.0)]
        rate: f64,
        /// Simulated seconds per wall-clock second ("inf" runs unpaced).
        #[arg(long, default_value_t = 1.0)]
        speed: f64,
        #[arg(long)]
        seed: Option<u64>,
        /// Write every frame here (CSV).
        #[arg(long)]
        log: Option<PathBuf>,
        /// Stop once the scenario ends instead of waiting for Ctrl-C.
        #[arg(long)]
        exit_when_finished: bool,
    },
    /// Open-loop run at a constant command; report the dominant J frequency.
    Natural {
        #[arg(long)]
        scenario: String,
        /// Normalized command in [0, 1] (0.38 = 38 000 PWM counts).
        #[arg(long, allow_negative_numbers = true)]
        command: f64,
        #[arg(long, allow_negative_numbers = true)]
        duration: Option<f64>,
        #[arg(long, default_value_t = 10.0)]
        f_min: f64,
    },
}

/// Bad command-line value; reported as a configuration error.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            scenario,
            seed,
            duration,
            out,
        } => cmd_run(&scenario, seed, duration, out),
        Command::Analyze {
            log,
            target,
            band,
            hold,
            f_min,
        } => cmd_analyze(log, target, band, hold, f_min),
        Command::Serve {
            scenario,
            host,
            port,
            rate,
            speed,
            seed,
            log,
            exit_when_finished,
        } => {
            let bridge = BridgeConfig {
                addr: SocketAddr::new(host, port),
                rate_hz: rate,
                speed,
                log_path: log,
                exit_when_finished,
                ..Default::default()
            };
            cmd_serve(&scenario, seed, bridge)
        }
        Command::Natural {
            scenario,
            command,
            duration,
            f_min,
        } => cmd_natural(&scenario, command, duration, f_min),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, kind) = classify(&e);
            let msg = one_line(&e);
            eprintln!("error[{kind}]: {msg}");
            ExitCode::from(code)
        }
    }
}

/// The error chain on one line, skipping causes already quoted by their parent.
fn one_line(e: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !msg.contains(&text) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&text);
        }
    }
    msg.replace('\n', " ")
}

/// Exit code and short label for an error chain.
fn classify(e: &anyhow::Error) -> (u8, &'static str) {
    const CONFIG: (u8, &str) = (2, "config");
    const DIVERGENCE: (u8, &str) = (3, "divergence");
    const IO: (u8, &str) = (4, "io");
    let sim = |s: &SimError| match s {
        SimError::Divergence { .. } | SimError::Controller { .. } => DIVERGENCE,
        SimError::InvalidConfig { .. } | SimError::InvalidCommand { .. } => CONFIG,
    };
    for cause in e.chain() {
        if let Some(c) = cause.downcast_ref::<ConfigError>() {
            return match c {
                ConfigError::Io { .. } => IO,
                _ => CONFIG,
            };
        }
        if let Some(s) = cause.downcast_ref::<SimError>() {
            return sim(s);
        }
        if let Some(b) = cause.downcast_ref::<BridgeError>() {
            return match b {
                BridgeError::InvalidConfig { .. } => CONFIG,
                BridgeError::Simulation(s) => sim(s),
                BridgeError::Bind { .. } | BridgeError::Log(_) => IO,
            };
        }
        if cause.is::<TelemetryError>() || cause.is::<std::io::Error>() {
            return IO;
        }
        if cause.is::<UsageError>() || cause.is::<SpectrumError>() {
            return CONFIG;
        }
    }
    IO
}

fn load(scenario: &str, seed: Option<u64>, duration: Option<f64>) -> Result<SimConfig> {
    let mut config = load_scenario(scenario)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    if let Some(d) = duration {
        config.duration = d;
        config.validate()?;
    }
    Ok(config)
}

fn print_report(report: &ConvergenceReport, band: f64) {
    println!("band_mm: {band:.3}");
    println!("converged: {}", report.converged);
    match report.settle_time {
        Some(t) => println!("settle_time_s: {t:.3}"),
        None => println!("settle_time_s: none"),
    }
    println!(
        "terminal_mean_abs_error_mm: {:.4}",
        report.terminal_mean_abs_error
    );
    println!("terminal_band_mm: {:.4}", report.terminal_band);
}

fn cmd_run(
    scenario: &str,
    seed: Option<u64>,
    duration: Option<f64>,
    out: Option<PathBuf>,
) -> Result<()> {
    let config = load(scenario, seed, duration)?;
    let log = run_scenario(&config, &[])?;
    if let Some(path) = &out {
        write_log(path, &log)?;
    }
    let ripple = measure_dither_ripple(&config)?;
    let band = acceptance_band(ripple);
    let report = detect_convergence(&log.frames, &Target::Logged, band, HOLD_S);
    let last = log.frames.last().expect("a run has at least one frame");

    println!("scenario: {}", config.name);
    println!("seed: {}", config.seed);
    println!("frames: {}", log.len());
    println!("final_t_s: {:.3}", last.t);
    println!("final_z_mm: {:.4}", last.z);
    println!("final_target_mm: {:.4}", last.z_src);
    println!("final_m: {:.4}", last.m);
    println!("ripple_mm: {ripple:.4}");
    print_report(&report, band);
    if let Some(path) = out {
        println!("log: {}", path.display());
    }
    Ok(())
}

fn frame_dt(frames: &[TelemetryFrame]) -> Option<f64> {
    match frames {
        [a, b, ..] if b.t > a.t => Some(b.t - a.t),
        _ => None,
    }
}

fn cmd_analyze(path: PathBuf, target: Option<f64>, band: f64, hold: f64, f_min: f64) -> Result<()> {
    if !(band.is_finite() && band > 0.0) {
        return Err(usage(format!("--band must be > 0 (got {band})")));
    }
    if !(hold.is_finite() && hold >= 0.0) {
        return Err(usage(format!("--hold must be >= 0 (got {hold})")));
    }
    let log = read_log(&path)?;
    if log.is_empty() {
        return Err(usage(format!("{} has no frames", path.display())));
    }
    let target = match target {
        Some(z) if z.is_finite() => Target::Fixed(z),
        Some(z) => return Err(usage(format!("--target must be finite (got {z})"))),
        None => Target::Logged,
    };
    let report = detect_convergence(&log.frames, &target, band, hold);
    println!("log: {}", path.display());
    println!("frames: {}", log.len());
    print_report(&report, band);

    let j = log.column(|f| f.j);
    match frame_dt(&log.frames).map(|dt| spectrum_peak(&j, dt, f_min)) {
        Some(Ok(peak)) => {
            println!("j_peak_hz: {:.4}", peak.frequency);
            println!("j_peak_prominence: {:.2}", peak.prominence());
        }
        Some(Err(e)) => println!("j_peak_hz: none ({e})"),
        None => println!("j_peak_hz: none (fewer than two increasing timestamps)"),
    }
    Ok(())
}

fn cmd_natural(scenario: &str, command: f64, duration: Option<f64>, f_min: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&command) {
        return Err(usage(format!(
            "--command is normalized to [0, 1] (got {command})"
        )));
    }
    let mut config = load(scenario, None, duration)?;
    let percent = normalized_to_command(command);
    config.mode = Mode::OpenLoop { m_const: percent };
    config.validate()?;
    let log = run_scenario(&config, &[])?;
    let peak = spectrum_peak(&log.column(|f| f.j), config.dt, f_min).context("J spectrum")?;
    let expected = 2.0 * config.dynamics.omega_f / (2.0 * std::f64::consts::PI);

    println!("scenario: {}", config.name);
    println!("command_percent: {percent:.3}");
    println!("frames: {}", log.len());
    println!("peak_hz: {:.4}", peak.frequency);
    println!("expected_hz: {expected:.4}");
    println!(
        "relative_error: {:.3e}",
        (peak.frequency - expected).abs() / expected
    );
    println!("bin_hz: {:.4}", peak.bin_width);
    println!("prominence: {:.2}", peak.prominence());
    Ok(())
}

fn cmd_serve(scenario: &str, seed: Option<u64>, bridge: BridgeConfig) -> Result<()> {
    let config = load(scenario, seed, None)?;
    let sim = Simulation::new(config)?;
    let runtime = tokio::runtime::Runtime::new().context("starting the async runtime")?;
    runtime.block_on(async move {
        let server = Server::bind(sim, bridge).await?;
        println!("listening: ws://{}", server.local_addr());
        let summary = server
            .run(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        println!("frames_simulated: {}", summary.frames_simulated);
        println!("frames_broadcast: {}", summary.frames_broadcast);
        println!("finished: {}", summary.finished);
        Ok(())
    })
}
