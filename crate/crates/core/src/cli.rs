//! Command-line front end.

use std::fs::{self, File};
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use serde::Serialize;

use crate::config::RunConfig;
use crate::detect::{
    default_scenarios, parse_scenarios, write_campaign_csv, CampaignResult, DetectError, Harness,
    Warmup,
};
use crate::metrics::{
    cluster_spatial_model, monte_carlo_temporal, objectives, spatial_distances, DistanceStats,
    ModelReport, MonteCarloConfig, MonteCarloResult, ObjectiveReport, SnapshotView,
    TemporalStrategy,
};
use crate::model::{build_model, ModelKind};
use crate::trace::{replay, TraceError};
use crate::SimRng;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 1;
pub const EXIT_INVARIANT: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "clustertag", version, about = "Tagged-memory allocator simulator")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Json,
    Csv,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Randomization density: pools admit 1GB/density bytes of clusters.
    #[arg(long, global = true, default_value_t = 5)]
    pub density: u32,
    #[arg(long, global = true, default_value_t = 16)]
    pub quarantine: usize,
    #[arg(long, global = true, default_value_t = 8)]
    pub tag_bits: u32,
    /// clustertag, random, random-header, staggered, fixed-temporal or sticky.
    #[arg(long, global = true, value_parser = parse_model)]
    pub strategy: Option<ModelKind>,
    #[arg(long, global = true)]
    pub rounds: Option<u64>,
    #[arg(long, global = true)]
    pub trace: Option<PathBuf>,
    #[arg(long, global = true)]
    pub scenarios: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub output: Option<OutputFormat>,
    /// Write every report into this directory instead of stdout.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Replay a JSON Lines allocation trace.
    Replay,
    /// Monte Carlo of same-slot tag reuse for circular shift and random tags.
    SimulateTemporal,
    /// Analytic and empirical spatial collision distances.
    AnalyzeSpatial,
    /// Injected-violation campaigns.
    Detect,
}

fn parse_model(s: &str) -> Result<ModelKind, String> {
    ModelKind::parse(s).ok_or_else(|| {
        let names: Vec<_> = ModelKind::ALL.iter().map(|k| k.name()).collect();
        format!("unknown strategy {s:?}; expected one of {}", names.join(", "))
    })
}

#[derive(Debug)]
pub enum CliError {
    Input(String),
    Invariant(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => EXIT_INPUT,
            CliError::Invariant(_) => EXIT_INVARIANT,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Input(m) | CliError::Invariant(m) => m,
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<TraceError> for CliError {
    fn from(e: TraceError) -> Self {
        match e {
            TraceError::Invariant(_) => CliError::Invariant(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<DetectError> for CliError {
    fn from(e: DetectError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl CommonArgs {
    pub fn run_config(&self) -> Result<RunConfig, CliError> {
        let cfg = RunConfig {
            seed: self.seed,
            density: self.density,
            quarantine: self.quarantine,
            tag_bits: self.tag_bits,
            strategy: self.strategy.unwrap_or(ModelKind::ClusterTag),
            ..RunConfig::default()
        };
        cfg.baseline().map_err(|e| CliError::Input(e.to_string()))?;
        // Narrow tags leave clustertag out of multi-model runs instead of failing them.
        if self.strategy == Some(ModelKind::ClusterTag) || self.tag_bits == 8 {
            cfg.clustertag().map_err(|e| CliError::Input(e.to_string()))?;
        }
        Ok(cfg)
    }
}

/// Collects named outputs; either prints them or writes them to a directory.
struct Sink<'a> {
    out_dir: Option<&'a Path>,
    stdout: &'a mut dyn Write,
}

impl Sink<'_> {
    fn emit(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        match self.out_dir {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                fs::write(dir.join(name), bytes)?;
            }
            None => self.stdout.write_all(bytes)?,
        }
        Ok(())
    }
}

fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("reports serialize");
    v.push(b'\n');
    v
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            let _ = if code == EXIT_OK {
                write!(stdout, "{e}")
            } else {
                write!(stderr, "{e}")
            };
            return code;
        }
    };
    match execute(&cli, stdout) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(stderr, "error: {}", e.message());
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli, stdout: &mut dyn Write) -> Result<(), CliError> {
    let common = &cli.common;
    let config = common.run_config()?;
    let mut sink = Sink {
        out_dir: common.out_dir.as_deref(),
        stdout,
    };
    match cli.command {
        Command::Replay => cmd_replay(common, &config, &mut sink),
        Command::SimulateTemporal => cmd_simulate_temporal(common, &config, &mut sink),
        Command::AnalyzeSpatial => cmd_analyze_spatial(common, &config, &mut sink),
        Command::Detect => cmd_detect(common, &config, &mut sink),
    }
}

fn cmd_replay(common: &CommonArgs, config: &RunConfig, sink: &mut Sink) -> Result<(), CliError> {
    let path = common
        .trace
        .as_ref()
        .ok_or_else(|| CliError::Input("replay needs --trace FILE".into()))?;
    let file = File::open(path)
        .map_err(|e| CliError::Input(format!("cannot open {}: {e}", path.display())))?;
    let mut model = build_model(config.strategy, config, config.seed)
        .map_err(|e| CliError::Input(e.to_string()))?;
    let report = replay(model.as_mut(), BufReader::new(file))?;
    sink.emit("replay.json", &to_json(&report))
}

#[derive(Debug, Serialize)]
pub struct TemporalReport {
    pub rounds: u64,
    pub circular_shift: DistanceStats,
    pub random: DistanceStats,
}

fn histogram_csv(result: &MonteCarloResult) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    result
        .samples
        .write_csv(&mut buf)
        .map_err(|e| CliError::Input(e.to_string()))?;
    Ok(buf)
}

fn cmd_simulate_temporal(
    common: &CommonArgs,
    config: &RunConfig,
    sink: &mut Sink,
) -> Result<(), CliError> {
    let rounds = common.rounds.unwrap_or(MonteCarloConfig::default().rounds);
    if rounds == 0 {
        return Err(CliError::Input("rounds must be at least 1".into()));
    }
    let mc = MonteCarloConfig {
        rounds,
        quarantine: config.quarantine,
        allocatable: config.allocatable.min(255 - config.quarantine),
        ..MonteCarloConfig::default()
    };
    let mut rng = SimRng::seed_from_u64(config.seed);
    let shift = monte_carlo_temporal(TemporalStrategy::CircularShift, &mc, &mut rng);
    let random = monte_carlo_temporal(TemporalStrategy::Random, &mc, &mut rng);
    let report = TemporalReport {
        rounds,
        circular_shift: shift.stats,
        random: random.stats,
    };
    if common.out_dir.is_some() {
        sink.emit("temporal_stats.json", &to_json(&report))?;
        sink.emit("temporal_circular_shift.csv", &histogram_csv(&shift)?)?;
        return sink.emit("temporal_random.csv", &histogram_csv(&random)?);
    }
    match common.output.unwrap_or(OutputFormat::Json) {
        OutputFormat::Json => sink.emit("temporal_stats.json", &to_json(&report)),
        OutputFormat::Csv => {
            let arm = match common.strategy {
                Some(ModelKind::Random) => &random,
                _ => &shift,
            };
            sink.emit("temporal.csv", &histogram_csv(arm)?)
        }
    }
}

#[derive(Debug, Serialize)]
pub struct SpatialEntry {
    pub model: String,
    pub samples: u64,
    pub objectives: Option<ObjectiveReport>,
}

#[derive(Debug, Serialize)]
pub struct SpatialReport {
    pub density: u32,
    pub workload_ops: u64,
    pub analytic: ModelReport,
    pub empirical: Vec<SpatialEntry>,
}

/// Spatial objectives of one model after a random allocate/free workload.
pub fn empirical_spatial(
    kind: ModelKind,
    config: &RunConfig,
    ops: u64,
) -> Result<SpatialEntry, CliError> {
    let cfg = RunConfig {
        record_history: false,
        ..config.clone()
    };
    let mut model = build_model(kind, &cfg, config.seed).map_err(|e| CliError::Input(e.to_string()))?;
    let warmup = Warmup {
        ops,
        max_size: 0x1000,
        free_probability: 0.3,
        ..Warmup::default()
    };
    let mut rng = SimRng::seed_from_u64(config.seed.wrapping_add(1));
    warmup
        .run(model.as_mut(), &mut rng)
        .map_err(|e| CliError::Invariant(e.to_string()))?;
    model
        .check_invariants()
        .map_err(|e| CliError::Invariant(e.to_string()))?;
    let dist = spatial_distances(&SnapshotView::from_chunks(&model.tagged_chunks()));
    Ok(SpatialEntry {
        model: kind.name().to_string(),
        samples: dist.total(),
        objectives: objectives(&dist).ok(),
    })
}

fn selected_models(common: &CommonArgs, config: &RunConfig) -> Vec<ModelKind> {
    match common.strategy {
        Some(k) => vec![k],
        None => ModelKind::ALL
            .into_iter()
            .filter(|&k| k != ModelKind::ClusterTag || config.clustertag().is_ok())
            .collect(),
    }
}

fn cmd_analyze_spatial(
    common: &CommonArgs,
    config: &RunConfig,
    sink: &mut Sink,
) -> Result<(), CliError> {
    let ops = common.rounds.unwrap_or(20_000);
    let empirical = selected_models(common, config)
        .into_iter()
        .map(|k| empirical_spatial(k, config, ops))
        .collect::<Result<Vec<_>, _>>()?;
    let report = SpatialReport {
        density: config.density,
        workload_ops: ops,
        analytic: cluster_spatial_model(config.density),
        empirical,
    };
    sink.emit("spatial.json", &to_json(&report))
}

fn cmd_detect(common: &CommonArgs, config: &RunConfig, sink: &mut Sink) -> Result<(), CliError> {
    let scenarios = match &common.scenarios {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
            parse_scenarios(&text)?
        }
        None => default_scenarios(),
    };
    let harness = Harness {
        config: RunConfig {
            record_history: false,
            ..config.clone()
        },
        warmup: Warmup::default(),
    };
    let mut seeds = SimRng::seed_from_u64(config.seed);
    let mut results: Vec<CampaignResult> = Vec::new();
    for scenario in &scenarios {
        let seed: u64 = seeds.gen();
        for kind in selected_models(common, config) {
            results.push(harness.run_scenario(kind, scenario, seed)?);
        }
    }
    match common.output.unwrap_or(OutputFormat::Csv) {
        OutputFormat::Csv => {
            let mut buf = Vec::new();
            write_campaign_csv(&mut buf, &results).map_err(|e| CliError::Input(e.to_string()))?;
            sink.emit("campaigns.csv", &buf)
        }
        OutputFormat::Json => sink.emit("campaigns.json", &to_json(&results)),
    }
}
