use std::io::Read;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use dexmouse_client::Client;
use dexmouse_core::api::{self, EpisodeRequest, ProfileSource, RetargetRequest, RetargetResponse, WireDecodeRequest, WireDecodeResponse};
use dexmouse_core::firmware::ParamOverrides;
use dexmouse_core::logger::{EpisodeStats, ReplayReport, ValidationReport};
use dexmouse_core::retarget::{HandProfile, BUILTIN_PROFILES};
use dexmouse_core::session::{self, Clock, ExitReport, InputScript, Mode, SessionConfig};
use dexmouse_core::streams::AlignConfig;
use dexmouse_core::units::{Ticks, CHANNEL_COUNT};
use dexmouse_server::Service;

#[derive(Parser)]
#[command(name = "dexmouse", version, about = "Teleoperation twin: control loop service and episode tools")]
struct Cli {
    /// Send tool requests to a running service instead of computing locally.
    #[arg(long, global = true, env = "DEXMOUSE_SERVER")]
    server: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a session. Serves the live API unless --sim-clock is given
    /// without --port.
    Run(RunArgs),
    /// Serve the episode and wire tools without a control loop.
    Serve {
        #[arg(long, default_value_t = 8765)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        bind: IpAddr,
        /// Directory listed under /api/episodes.
        #[arg(long, env = "DEXMOUSE_LOG_DIR")]
        log_dir: Option<PathBuf>,
    },
    /// Check an episode file against the log format.
    Validate {
        file: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Per-episode summary.
    Stats {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        /// One CSV row per file instead of JSON.
        #[arg(long)]
        csv: bool,
    },
    /// Re-run the loop over an episode's logged inputs and compare outputs.
    Replay {
        file: PathBuf,
        #[command(flatten)]
        params: ParamFlags,
        /// Exit non-zero if anything diverges.
        #[arg(long)]
        check: bool,
        #[arg(long)]
        json: bool,
    },
    /// Export an episode as a fixed-rate CSV.
    Align {
        file: PathBuf,
        #[arg(long, default_value_t = 20)]
        rate: u32,
        #[arg(long, default_value_t = 150)]
        max_gap_ms: u64,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Map rows of device readings (five FE ticks then the AA raw value)
    /// to robot joint angles.
    Retarget {
        /// Shipped profile name or a profile file.
        #[arg(long)]
        profile: String,
        /// CSV input, `-` for stdin. A non-numeric first row is a header.
        input: PathBuf,
    },
    /// Bus frame tools.
    Wire {
        #[command(subcommand)]
        command: WireCommand,
    },
}

#[derive(Subcommand)]
enum WireCommand {
    /// Decode a capture: a hex string or a path to a binary file.
    Dump {
        input: String,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Base configuration file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    profile: Option<String>,
    #[arg(long)]
    scenario: Option<String>,
    /// Step as fast as possible instead of at 100 Hz.
    #[arg(long)]
    sim_clock: bool,
    #[arg(long)]
    port: Option<u16>,
    #[arg(long, default_value = "127.0.0.1")]
    bind: IpAddr,
    /// Timed command script.
    #[arg(long)]
    script: Option<PathBuf>,
    #[arg(long)]
    cycles: Option<u64>,
    #[arg(long, env = "DEXMOUSE_LOG_DIR")]
    log_dir: Option<PathBuf>,
    #[arg(long)]
    session_id: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Drive the operator input from a recorded episode.
    #[arg(long)]
    replay: Option<PathBuf>,
    #[command(flatten)]
    params: ParamFlags,
}

#[derive(Args, Default)]
struct ParamFlags {
    #[arg(long)]
    k_nominal: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    v_th: Option<i64>,
    #[arg(long)]
    epsilon: Option<i64>,
    #[arg(long)]
    tau_max: Option<f64>,
    #[arg(long)]
    ema_alpha: Option<f64>,
    #[arg(long)]
    debounce_cycles: Option<u32>,
}

impl ParamFlags {
    fn overrides(&self) -> Option<ParamOverrides> {
        let o = ParamOverrides {
            k_nominal: self.k_nominal,
            gamma: self.gamma,
            v_th: self.v_th.map(Ticks),
            epsilon: self.epsilon.map(Ticks),
            tau_max: self.tau_max,
            ema_alpha: self.ema_alpha,
            debounce_cycles: self.debounce_cycles,
        };
        (o != ParamOverrides::default()).then_some(o)
    }
}

/// Where tool requests go.
enum Tools {
    Local,
    Remote(Client, tokio::runtime::Runtime),
}

impl Tools {
    fn new(server: Option<&str>) -> Result<Tools> {
        match server {
            None => Ok(Tools::Local),
            Some(url) => {
                let rt = tokio::runtime::Builder::new_current_thread().enable_all().build()?;
                Ok(Tools::Remote(Client::new(url), rt))
            }
        }
    }

    fn validate(&self, episode: String) -> Result<ValidationReport> {
        match self {
            Tools::Local => Ok(api::validate_episode(&EpisodeRequest::new(episode))),
            Tools::Remote(c, rt) => Ok(rt.block_on(c.validate(episode))?),
        }
    }

    fn stats(&self, episode: String) -> Result<EpisodeStats> {
        match self {
            Tools::Local => Ok(api::episode_stats(&EpisodeRequest::new(episode))?),
            Tools::Remote(c, rt) => Ok(rt.block_on(c.stats(episode))?),
        }
    }

    fn replay(&self, episode: String, overrides: Option<ParamOverrides>) -> Result<ReplayReport> {
        match self {
            Tools::Local => Ok(api::replay_episode(&EpisodeRequest { overrides, ..EpisodeRequest::new(episode) })?),
            Tools::Remote(c, rt) => Ok(rt.block_on(c.replay(episode, overrides))?),
        }
    }

    fn align(&self, episode: String, cfg: AlignConfig) -> Result<api::AlignResponse> {
        match self {
            Tools::Local => Ok(api::align_episode(&EpisodeRequest { align: Some(cfg), ..EpisodeRequest::new(episode) })?),
            Tools::Remote(c, rt) => Ok(rt.block_on(c.align(episode, cfg))?),
        }
    }

    fn retarget(&self, req: RetargetRequest) -> Result<RetargetResponse> {
        match self {
            Tools::Local => Ok(api::retarget_rows(&req)?),
            Tools::Remote(c, rt) => Ok(rt.block_on(c.retarget(&req))?),
        }
    }

    fn wire_decode(&self, hex: String) -> Result<WireDecodeResponse> {
        match self {
            Tools::Local => Ok(api::wire_decode(&WireDecodeRequest { hex })?),
            Tools::Remote(c, rt) => Ok(rt.block_on(c.wire_decode(&hex))?),
        }
    }
}

fn read_episode(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn main() -> Result<ExitCode> {
    let cli = Cli::parse();
    if let Command::Run(args) = cli.command {
        if cli.server.is_some() {
            bail!("run hosts its own service; --server does not apply");
        }
        return run(args);
    }
    if let Command::Serve { port, bind, log_dir } = cli.command {
        return serve(SocketAddr::new(bind, port), log_dir);
    }
    let tools = Tools::new(cli.server.as_deref())?;
    match cli.command {
        Command::Validate { file, json } => {
            let report = tools.validate(read_episode(&file)?)?;
            if json {
                print_json(&report)?;
            } else {
                for v in &report.violations {
                    println!("line {}: {}", v.line, v.message);
                }
                println!("{} records, {} violation(s)", report.records, report.violations.len());
            }
            return Ok(if report.is_clean() { ExitCode::SUCCESS } else { ExitCode::FAILURE });
        }
        Command::Stats { files, csv } => {
            if csv {
                println!("file,{}", EpisodeStats::csv_header());
            }
            for f in &files {
                let s = tools.stats(read_episode(f)?).with_context(|| f.display().to_string())?;
                if csv {
                    println!("{},{}", f.display(), s.csv_row());
                } else {
                    print_json(&s)?;
                }
            }
        }
        Command::Replay { file, params, check, json } => {
            let report = tools.replay(read_episode(&file)?, params.overrides())?;
            if json {
                print_json(&report)?;
            } else {
                println!("{} cycles, {} outputs compared, {} divergence(s)", report.cycles, report.compared, report.divergences);
                if let Some(d) = &report.first {
                    println!(
                        "first: {} at {:.2} s\n  logged   {}\n  replayed {}",
                        d.stream.name(),
                        d.t.as_secs_f64(),
                        d.expected,
                        d.actual
                    );
                }
            }
            if check && !report.is_identical() {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Align { file, rate, max_gap_ms, output } => {
            let cfg = AlignConfig { rate_hz: rate, max_gap_ms, ..AlignConfig::default() };
            let res = tools.align(read_episode(&file)?, cfg)?;
            match output {
                Some(p) => std::fs::write(&p, &res.csv).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{}", res.csv),
            }
            eprintln!("{} grid row(s) dropped", res.dropped);
        }
        Command::Retarget { profile, input } => {
            let source = profile_source(&profile)?;
            let rows = read_rows(&input)?;
            let res = tools.retarget(RetargetRequest { profile: source, rows })?;
            let mut out = csv::Writer::from_writer(std::io::stdout().lock());
            out.write_record(&res.joint_names)?;
            for row in &res.rows {
                out.write_record(row.iter().map(|a| a.to_string()))?;
            }
            out.flush()?;
            if res.clamped_rows > 0 {
                eprintln!("{} row(s) had readings outside the device range", res.clamped_rows);
            }
        }
        Command::Wire { command: WireCommand::Dump { input, json } } => {
            let hex = if Path::new(&input).is_file() {
                let bytes = std::fs::read(&input).with_context(|| format!("reading {input}"))?;
                dexmouse_core::wire::hex_spaced(&bytes)
            } else {
                input
            };
            let res = tools.wire_decode(hex)?;
            if json {
                print_json(&res)?;
            } else {
                print!("{}", res.dump);
            }
        }
        Command::Run(_) | Command::Serve { .. } => unreachable!("handled above"),
    }
    Ok(ExitCode::SUCCESS)
}

/// A shipped name passes through; a file is read here so a remote service
/// does not need access to it.
fn profile_source(profile: &str) -> Result<ProfileSource> {
    if BUILTIN_PROFILES.iter().any(|(n, _)| *n == profile) {
        return Ok(ProfileSource::Name(profile.into()));
    }
    Ok(ProfileSource::Document(Box::new(HandProfile::resolve(profile)?)))
}

fn read_rows(input: &Path) -> Result<Vec<[i64; CHANNEL_COUNT]>> {
    let mut text = String::new();
    if input == Path::new("-") {
        std::io::stdin().read_to_string(&mut text)?;
    } else {
        text = std::fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
    }
    let mut reader = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let cells: Result<Vec<i64>, _> = rec.iter().map(str::parse).collect();
        match cells {
            Ok(v) if v.len() == CHANNEL_COUNT => rows.push(std::array::from_fn(|k| v[k])),
            Ok(v) => bail!("line {}: expected {CHANNEL_COUNT} values, got {}", i + 1, v.len()),
            Err(_) if i == 0 => continue,
            Err(e) => bail!("line {}: {e}", i + 1),
        }
    }
    Ok(rows)
}

fn session_config(args: &RunArgs) -> Result<SessionConfig> {
    let mut c = match &args.config {
        Some(p) => serde_json::from_str(&read_episode(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => SessionConfig::default(),
    };
    if let Some(p) = &args.profile {
        c.profile = p.clone();
    }
    if let Some(s) = &args.scenario {
        c.scenario = s.clone();
    }
    if let Some(d) = &args.log_dir {
        c.log_dir = Some(d.clone());
    }
    if let Some(id) = &args.session_id {
        c.session_id = id.clone();
    }
    if let Some(s) = args.seed {
        c.seed = s;
    }
    if let Some(p) = args.port {
        c.api_port = p;
    }
    if args.cycles.is_some() {
        c.max_cycles = args.cycles;
    }
    if let Some(r) = &args.replay {
        c.mode = Mode::Replay;
        c.replay_source = Some(r.clone());
    }
    if let Some(o) = args.params.overrides() {
        c.ff_overrides = o;
    }
    c.clock = if args.sim_clock { Clock::Simulated } else { Clock::Wall };
    let c = c.with_env_log_dir();
    if let Some(d) = &c.log_dir {
        std::fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
    }
    Ok(c)
}

fn init_logging() {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
}

fn print_report(report: &ExitReport) -> Result<ExitCode> {
    print_json(report)?;
    Ok(if report.storage_errors.is_empty() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn run(args: RunArgs) -> Result<ExitCode> {
    let config = session_config(&args)?;
    let script = match &args.script {
        Some(p) => InputScript::load(p)?,
        None => InputScript::default(),
    };
    if args.sim_clock && args.port.is_none() {
        let (report, episodes) = session::run_session(config, &script)?;
        let in_memory = episodes.iter().filter(|e| e.path.is_none()).count();
        if in_memory > 0 {
            eprintln!("{in_memory} episode(s) discarded: no log directory");
        }
        return print_report(&report);
    }
    init_logging();
    let addr = SocketAddr::new(args.bind, config.api_port);
    let rt = tokio::runtime::Runtime::new()?;
    let report = rt.block_on(async move {
        let service = Service::start(addr, Some(config), script).await?;
        eprintln!("listening on http://{}", service.addr);
        tokio::select! {
            _ = service.loop_finished() => {}
            _ = tokio::signal::ctrl_c() => eprintln!("interrupted"),
        }
        anyhow::Ok(service.shutdown().await?)
    })?;
    match report {
        Some(r) => print_report(&r),
        None => Ok(ExitCode::SUCCESS),
    }
}

fn serve(addr: SocketAddr, log_dir: Option<PathBuf>) -> Result<ExitCode> {
    init_logging();
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await.with_context(|| format!("binding {addr}"))?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        let app = dexmouse_server::App::new(None, log_dir);
        dexmouse_server::serve(listener, app, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
        anyhow::Ok(())
    })?;
    Ok(ExitCode::SUCCESS)
}
