//! Command-line front end.
//!
//! Every command that writes files builds a [`RunManifest`] first. JSON
//! outputs embed it under `"manifest"` together with its SHA-256; CSV outputs
//! start with a `# manifest <sha256>` line. Exit codes: 0 success, 1 numeric
//! failure, 2 input error.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::coverage::{dimension_stats, pareto_local_audit, solve, validate, CoverFile};
use crate::error::{Error, Result};
use crate::gains::{
    default_controller_poles, design_controller_microgrid, synthesize, ControllerGains, CrossGain, DesignFile,
    GammaPolicy, ObserverDesign, WeightSimilarity,
};
use crate::netgraph::{gen_random_pair, similarity, GraphFile, NetworkPair};
use crate::observer::ObserverSystem;
use crate::plant::{check_structure, BlockPlant, MicrogridSpec, PlantFile};
use crate::simloop::{
    invariant_set_report, run_centralized, run_distributed_with, stiffness_step, theta_sweep, write_csv,
    write_sweep_csv, SimConfig, SimResult, StepPolicy, SweepConfig, STIFFNESS_SAFETY,
};

/// Caps the rayon pool used by sweeps.
pub const THREADS_ENV: &str = "COVEROBS_THREADS";

const MAX_AUTO_STEP: f64 = 1e-3;

#[derive(Debug, Parser)]
#[command(name = "coverobs", version, about = "Cover-based distributed observers for large-scale LTI systems")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate or inspect network pairs.
    #[command(subcommand)]
    Net(NetCommand),
    /// Solve, audit and summarise covers.
    #[command(subcommand)]
    Cover(CoverCommand),
    /// Synthesise observer and controller gains.
    #[command(subcommand)]
    Gains(GainsCommand),
    /// Simulate closed loops and sweep θ.
    #[command(subcommand)]
    Sim(SimCommand),
    /// net → cover → gains → sim → sweep in one go.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Subcommand)]
pub enum NetCommand {
    Gen(NetGenArgs),
    Info {
        #[arg(long)]
        graph: PathBuf,
    },
}

#[derive(Debug, Clone, Args)]
pub struct NetGenArgs {
    #[arg(short = 'n', long)]
    pub nodes: usize,
    /// Star on node 1 with identical physical and communication edges.
    #[arg(long)]
    pub star: bool,
    #[arg(long, default_value_t = 0.85)]
    pub similarity: f64,
    /// Mean physical degree.
    #[arg(long, default_value_t = 3.0)]
    pub degree: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum CoverCommand {
    Solve {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2)]
        block_order: usize,
        /// Also run the local Pareto audit (at most 12 nodes).
        #[arg(long)]
        audit: bool,
    },
    Audit {
        #[arg(long)]
        cover: PathBuf,
    },
    Stats {
        #[arg(long)]
        cover: PathBuf,
        #[arg(long, default_value_t = 2)]
        block_order: usize,
    },
}

#[derive(Debug, Subcommand)]
pub enum GainsCommand {
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Args)]
pub struct GammaArgs {
    /// Lower floor for γ; the default is `max(factor × bound, gamma)`.
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long, default_value_t = 1.1)]
    pub gamma_factor: f64,
    /// γ = 100θ².
    #[arg(long = "paper-gamma", conflicts_with = "gamma")]
    pub quadratic_gamma: bool,
}

impl GammaArgs {
    pub fn policy(&self) -> GammaPolicy {
        if self.quadratic_gamma {
            GammaPolicy::Quadratic
        } else {
            GammaPolicy::Bound {
                factor: self.gamma_factor,
                floor: self.gamma.unwrap_or(0.0),
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CrossGainArg {
    Cancel,
    Reinforce,
}

impl From<CrossGainArg> for CrossGain {
    fn from(v: CrossGainArg) -> Self {
        match v {
            CrossGainArg::Cancel => CrossGain::Cancel,
            CrossGainArg::Reinforce => CrossGain::Reinforce,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SimilarityArg {
    Inverse,
    Direct,
}

impl From<SimilarityArg> for WeightSimilarity {
    fn from(v: SimilarityArg) -> Self {
        match v {
            SimilarityArg::Inverse => WeightSimilarity::Inverse,
            SimilarityArg::Direct => WeightSimilarity::Direct,
        }
    }
}

/// Gain choices shared by synthesis, sweeps and the pipeline.
#[derive(Debug, Clone, Args)]
pub struct DesignArgs {
    #[command(flatten)]
    pub gamma: GammaArgs,
    /// Observer poles in scaled coordinates; default `-1,...,-n`.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub observer_poles: Option<Vec<f64>>,
    /// Local controller poles; default `-3,-4,...`.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub controller_poles: Option<Vec<f64>>,
    #[arg(long, value_enum, default_value_t = CrossGainArg::Cancel)]
    pub cross_gain: CrossGainArg,
    /// Similarity shaping the own-slot consensus weight.
    #[arg(long, value_enum, default_value_t = SimilarityArg::Inverse)]
    pub weight_similarity: SimilarityArg,
    /// Saturation level ℳ; default `10·max(1, ‖x0‖∞)` per run.
    #[arg(long)]
    pub sat_level: Option<f64>,
    /// Accept γ at or below the lower bound.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub plant: PathBuf,
    #[arg(long)]
    pub cover: PathBuf,
    #[arg(long)]
    pub theta: f64,
    #[command(flatten)]
    pub design: DesignArgs,
    /// Step the design is meant to run at; only used for the stiffness check.
    #[arg(long, default_value = "0.001")]
    pub step: StepArg,
    #[arg(long)]
    pub out: PathBuf,
}

/// A fixed step or `auto` (`min(1e-3, 0.5/ω_max)`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepArg {
    Fixed(f64),
    Auto,
}

impl FromStr for StepArg {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(StepArg::Auto);
        }
        match s.parse::<f64>() {
            Ok(h) if h > 0.0 && h.is_finite() => Ok(StepArg::Fixed(h)),
            _ => Err(format!("step must be a positive number or `auto`, got `{s}`")),
        }
    }
}

impl StepArg {
    fn resolve(self, omega: f64) -> f64 {
        match self {
            StepArg::Fixed(h) => h,
            StepArg::Auto => MAX_AUTO_STEP.min(STIFFNESS_SAFETY / omega.max(f64::MIN_POSITIVE)),
        }
    }

    fn label(self) -> String {
        match self {
            StepArg::Fixed(h) => format!("{h:e}"),
            StepArg::Auto => "auto".into(),
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum SimCommand {
    Run(RunArgs),
    Sweep(SweepArgs),
    /// Distributed and centralized runs plus the invariant-set radii.
    Report(ReportArgs),
}

/// Overrides applied on top of `--config`.
#[derive(Debug, Clone, Args)]
pub struct SimOverrides {
    #[arg(long)]
    pub horizon: Option<f64>,
    #[arg(long)]
    pub step: Option<StepArg>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub sat_level: Option<f64>,
    #[arg(long)]
    pub observer_init: Option<f64>,
    #[arg(long)]
    pub check_stacking: bool,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub plant: PathBuf,
    #[arg(long)]
    pub cover: PathBuf,
    #[arg(long)]
    pub design: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: SimOverrides,
    /// Integrate `ẋ = (A + BK)x` instead of the observer loop.
    #[arg(long)]
    pub centralized: bool,
    #[arg(long)]
    pub out: PathBuf,
    /// Write the run summary here instead of stdout.
    #[arg(long)]
    pub summary: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub plant: PathBuf,
    #[arg(long)]
    pub cover: PathBuf,
    #[arg(long)]
    pub design: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: SimOverrides,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub plant: PathBuf,
    #[arg(long)]
    pub cover: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "2,3,5,7,9,12,15")]
    pub thetas: Vec<f64>,
    #[arg(long, default_value_t = 6)]
    pub repeats: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub design: DesignArgs,
    #[arg(long, default_value_t = 10.0)]
    pub horizon: f64,
    #[arg(long, default_value = "auto")]
    pub step: StepArg,
    /// Safety factor `s` in `h = min(1e-3, s/ω_max)` for `--step auto`.
    #[arg(long, default_value_t = STIFFNESS_SAFETY)]
    pub safety: f64,
    #[arg(long, default_value_t = 2.0)]
    pub observer_init: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct PipelineArgs {
    /// Start from this network instead of generating one.
    #[arg(long)]
    pub graph: Option<PathBuf>,
    #[arg(short = 'n', long, default_value_t = 9)]
    pub nodes: usize,
    /// Generate a random pair instead of a star.
    #[arg(long)]
    pub random: bool,
    #[arg(long, default_value_t = 0.85)]
    pub similarity: f64,
    #[arg(long, default_value_t = 3.0)]
    pub degree: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub plant_seed: u64,
    /// Multiplier on the droop gains; 1 keeps the published ranges.
    #[arg(long, default_value_t = 1.0)]
    pub coupling_scale: f64,
    #[arg(long, default_value_t = 6.0)]
    pub theta: f64,
    #[command(flatten)]
    pub design: DesignArgs,
    #[arg(long, default_value_t = 10.0)]
    pub horizon: f64,
    #[arg(long, default_value = "auto")]
    pub step: StepArg,
    /// θ values for the sweep; defaults to `--theta`.
    #[arg(long, value_delimiter = ',')]
    pub thetas: Option<Vec<f64>>,
    #[arg(long, default_value_t = 1)]
    pub repeats: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
}

/// Inputs, seeds, versions, resolved configuration and outputs of one
/// command.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub inputs: BTreeMap<String, InputRecord>,
    pub seeds: BTreeMap<String, u64>,
    pub config: Value,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct InputRecord {
    pub path: String,
    pub sha256: String,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            inputs: BTreeMap::new(),
            seeds: BTreeMap::new(),
            config: json!({}),
            outputs: BTreeMap::new(),
        }
    }

    /// SHA-256 of the manifest's canonical JSON.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("manifest serialises");
        hex::encode(Sha256::digest(&bytes))
    }

    fn output(&mut self, key: &str, path: &Path) {
        self.outputs.insert(key.into(), path.display().to_string());
    }

    fn set(&mut self, key: &str, value: Value) {
        if let Value::Object(map) = &mut self.config {
            map.insert(key.into(), value);
        }
    }
}

#[derive(Serialize)]
struct Stamp<'a> {
    sha256: &'a str,
    #[serde(flatten)]
    run: &'a RunManifest,
}

#[derive(Serialize)]
struct Stamped<'a, T: Serialize> {
    manifest: Stamp<'a>,
    #[serde(flatten)]
    body: &'a T,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Reads and parses a JSON input. `what` names the file and the stage that
/// produces it so a missing intermediate points at the right command.
fn load_json<T: DeserializeOwned>(path: &Path, what: &str) -> Result<(T, InputRecord)> {
    let bytes = fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::Config(format!("{what} file {} not found", path.display()))
        } else {
            Error::Config(format!("cannot read {what} file {}: {e}", path.display()))
        }
    })?;
    let value = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Config(format!("cannot parse {what} file {}: {e}", path.display())))?;
    let record = InputRecord {
        path: path.display().to_string(),
        sha256: sha256_hex(&bytes),
    };
    Ok((value, record))
}

fn write_stamped<T: Serialize>(path: &Path, body: &T, manifest: &RunManifest, hash: &str) -> Result<()> {
    let stamped = Stamped {
        manifest: Stamp { sha256: hash, run: manifest },
        body,
    };
    let mut text = serde_json::to_string_pretty(&stamped)?;
    text.push('\n');
    create_parent(path)?;
    fs::write(path, text)?;
    Ok(())
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn open_out(path: &Path) -> Result<BufWriter<fs::File>> {
    create_parent(path)?;
    Ok(BufWriter::new(fs::File::create(path)?))
}

fn print_json(value: &Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("summary serialises"));
}

fn warn(msg: &str) {
    eprintln!("warning: {msg}");
}

/// Applies `COVEROBS_THREADS` to the global rayon pool.
pub fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&t| t > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{raw}`")))?;
    // A second initialisation (tests running in one process) keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    Ok(())
}

/// Exit code for an error: 2 for bad inputs, 1 for numerical failures.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_input_error() {
        2
    } else {
        1
    }
}

/// Parses `std::env::args`, runs the command and returns the exit code.
pub fn main_entry() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match configure_threads().and_then(|_| run(cli)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Net(NetCommand::Gen(args)) => net_gen(&args),
        Command::Net(NetCommand::Info { graph }) => net_info(&graph),
        Command::Cover(CoverCommand::Solve {
            graph,
            out,
            block_order,
            audit,
        }) => cover_solve(&graph, &out, block_order, audit),
        Command::Cover(CoverCommand::Audit { cover }) => cover_audit(&cover),
        Command::Cover(CoverCommand::Stats { cover, block_order }) => cover_stats(&cover, block_order),
        Command::Gains(GainsCommand::Synth(args)) => gains_synth(&args),
        Command::Sim(SimCommand::Run(args)) => sim_run(&args),
        Command::Sim(SimCommand::Sweep(args)) => sim_sweep(&args),
        Command::Sim(SimCommand::Report(args)) => sim_report(&args),
        Command::Pipeline(args) => pipeline(&args),
    }
}

fn generate_pair(nodes: usize, star: bool, target: f64, degree: f64, seed: u64) -> Result<NetworkPair> {
    if star {
        NetworkPair::star(nodes)
    } else {
        gen_random_pair(nodes, degree, target, seed)
    }
}

fn graph_summary(pair: &NetworkPair) -> Result<Value> {
    let max_degree = (0..pair.len()).map(|i| pair.physical_neighbors(i).len()).max().unwrap_or(0);
    Ok(json!({
        "nodes": pair.len(),
        "phys_edges": pair.phys_edges().len(),
        "comm_edges": pair.comm_edges().len(),
        "max_phys_in_degree": max_degree,
        "similarity": similarity(pair)?,
    }))
}

fn net_gen(args: &NetGenArgs) -> Result<()> {
    let pair = generate_pair(args.nodes, args.star, args.similarity, args.degree, args.seed)?;
    let mut manifest = RunManifest::new("net gen");
    manifest.seeds.insert("network".into(), args.seed);
    manifest.config = json!({
        "nodes": args.nodes,
        "star": args.star,
        "target_similarity": args.similarity,
        "degree": args.degree,
    });
    manifest.output("graph", &args.out);
    let hash = manifest.hash();
    write_stamped(&args.out, &pair.to_file(), &manifest, &hash)?;
    let mut summary = graph_summary(&pair)?;
    summary["manifest"] = json!(hash);
    print_json(&summary);
    Ok(())
}

fn net_info(path: &Path) -> Result<()> {
    let (file, record) = load_json::<GraphFile>(path, "graph (stage `net gen`)")?;
    let pair = file.to_pair()?;
    let mut summary = graph_summary(&pair)?;
    summary["sha256"] = json!(record.sha256);
    print_json(&summary);
    Ok(())
}

fn load_cover(path: &Path) -> Result<(NetworkPair, crate::coverage::CoverAssignment, InputRecord)> {
    let (file, record) = load_json::<CoverFile>(path, "cover (stage `cover solve`)")?;
    let (pair, cover) = file.load()?;
    Ok((pair, cover, record))
}

fn stats_value(cover: &crate::coverage::CoverAssignment, block_order: usize) -> Result<Value> {
    let stats = dimension_stats(cover, block_order)?;
    Ok(json!({
        "sets": cover.active_sets().count(),
        "max": stats.max,
        "min": stats.min,
        "mean": stats.mean,
        "full": stats.full,
        "reduction%": {
            "max": 100.0 * stats.max_reduction,
            "min": 100.0 * stats.min_reduction,
            "mean": 100.0 * stats.mean_reduction,
        },
    }))
}

fn audit_value(cover: &crate::coverage::CoverAssignment, pair: &NetworkPair) -> Result<Value> {
    let outcome = pareto_local_audit(cover, pair)?;
    Ok(serde_json::to_value(outcome)?)
}

fn cover_solve(graph: &Path, out: &Path, block_order: usize, audit: bool) -> Result<()> {
    let (file, record) = load_json::<GraphFile>(graph, "graph (stage `net gen`)")?;
    let pair = file.to_pair()?;
    let cover = solve(&pair);
    let report = validate(&cover, &pair);
    if !report.is_valid() {
        return Err(Error::Numeric(format!("solver produced an invalid cover: {:?}", report.violations)));
    }
    let mut manifest = RunManifest::new("cover solve");
    manifest.inputs.insert("graph".into(), record);
    manifest.config = json!({ "block_order": block_order, "audit": audit });
    manifest.output("cover", out);
    let hash = manifest.hash();
    write_stamped(out, &CoverFile::new(&cover, &pair), &manifest, &hash)?;
    let mut summary = json!({
        "manifest": hash,
        "valid": true,
        "total_load": cover.total_load(),
        "cover_sets": CoverFile::new(&cover, &pair).sets,
        "stats": stats_value(&cover, block_order)?,
    });
    if audit {
        summary["audit"] = audit_value(&cover, &pair)?;
    }
    print_json(&summary);
    Ok(())
}

fn cover_audit(path: &Path) -> Result<()> {
    let (pair, cover, record) = load_cover(path)?;
    let mut summary = audit_value(&cover, &pair)?;
    summary["sha256"] = json!(record.sha256);
    print_json(&summary);
    Ok(())
}

fn cover_stats(path: &Path, block_order: usize) -> Result<()> {
    let (_, cover, record) = load_cover(path)?;
    let mut summary = stats_value(&cover, block_order)?;
    summary["sha256"] = json!(record.sha256);
    print_json(&summary);
    Ok(())
}

/// Plant, pair, cover and their input records.
struct Loaded {
    pair: NetworkPair,
    cover: crate::coverage::CoverAssignment,
    plant: BlockPlant,
    records: BTreeMap<String, InputRecord>,
}

fn load_plant_and_cover(plant_path: &Path, cover_path: &Path) -> Result<Loaded> {
    let (pair, cover, cover_record) = load_cover(cover_path)?;
    let (plant_file, plant_record) = load_json::<PlantFile>(plant_path, "plant")?;
    let plant = plant_file.resolve(&pair)?;
    let structure = check_structure(&plant);
    if !structure.all_observable() {
        return Err(Error::Unobservable("some (C_i, A_ii) pair is unobservable".into()));
    }
    let mut records = BTreeMap::new();
    records.insert("cover".to_string(), cover_record);
    records.insert("plant".to_string(), plant_record);
    Ok(Loaded {
        pair,
        cover,
        plant,
        records,
    })
}

fn controller(plant: &BlockPlant, args: &DesignArgs) -> Result<(ControllerGains, Vec<f64>)> {
    let (n, _, _) = plant.orders();
    let poles = args.controller_poles.clone().unwrap_or_else(|| default_controller_poles(n));
    let gains = design_controller_microgrid(
        plant,
        &poles,
        args.cross_gain.into(),
        args.sat_level.unwrap_or(f64::INFINITY),
    )?;
    Ok((gains, poles))
}

fn design_at(loaded: &Loaded, gains: &ControllerGains, theta: f64, args: &DesignArgs) -> Result<ObserverDesign> {
    let mut design = synthesize(
        &loaded.plant,
        &loaded.cover,
        &loaded.pair,
        theta,
        gains,
        args.gamma.policy(),
        args.observer_poles.as_deref(),
        args.force,
    )?;
    design.set_similarity(args.weight_similarity.into())?;
    Ok(design)
}

/// Warns when `step` is beyond the stiffness heuristic and returns the
/// resolved step.
fn check_stiffness(system: &ObserverSystem, step: StepArg, quadratic_gamma: bool) -> f64 {
    let (omega, h_max) = stiffness_step(system);
    let h = step.resolve(omega);
    if h > h_max {
        let hint = if quadratic_gamma {
            " (γ = 100θ² makes the consensus term very stiff)"
        } else {
            ""
        };
        warn(&format!(
            "stiff observer{hint}: ω_max = {omega:.3e}, step {h:.3e} exceeds {STIFFNESS_SAFETY}/ω_max = {h_max:.3e}; use a smaller --step or --step auto"
        ));
    }
    h
}

fn design_config(design: &ObserverDesign, args: &DesignArgs, controller_poles: &[f64]) -> Value {
    json!({
        "theta": design.theta,
        "gamma": design.gamma,
        "gamma_lower_bound": design.gamma_lower_bound,
        "gamma_policy": args.gamma.policy(),
        "observer_poles": design.poles,
        "controller_poles": controller_poles,
        "cross_gain": CrossGain::from(args.cross_gain),
        "similarity": design.similarity,
        "sat_level": args.sat_level,
        "force": args.force,
    })
}

fn gains_synth(args: &SynthArgs) -> Result<()> {
    let loaded = load_plant_and_cover(&args.plant, &args.cover)?;
    let (gains, poles) = controller(&loaded.plant, &args.design)?;
    let design = design_at(&loaded, &gains, args.theta, &args.design)?;
    let system = ObserverSystem::new(&loaded.plant, &loaded.cover, &loaded.pair, &design, &gains)?;
    let h = check_stiffness(&system, args.step, args.design.gamma.quadratic_gamma);
    if design.gamma <= design.gamma_lower_bound {
        warn(&format!(
            "γ = {:.4e} does not exceed the lower bound {:.4e}; convergence is not guaranteed",
            design.gamma, design.gamma_lower_bound
        ));
    }
    let file = DesignFile::new(&design, &gains, args.design.gamma.policy(), &poles, args.design.cross_gain.into());
    let mut manifest = RunManifest::new("gains synth");
    manifest.inputs = loaded.records.clone();
    manifest.config = design_config(&design, &args.design, &poles);
    manifest.set("step", json!(h));
    manifest.output("design", &args.out);
    let hash = manifest.hash();
    write_stamped(&args.out, &file, &manifest, &hash)?;
    print_json(&json!({
        "manifest": hash,
        "theta": design.theta,
        "gamma": design.gamma,
        "gamma_lower_bound": design.gamma_lower_bound,
        "c_theta": design.c_theta(),
        "max_weight_residual": file.agents.iter().map(|a| a.weight_residual).fold(0.0, f64::max),
        "base_observer_abscissa": file.agents.iter().map(|a| a.observer_abscissa).fold(f64::NEG_INFINITY, f64::max),
        "stiffness": system.stiffness(),
    }));
    Ok(())
}

fn sim_config(config: Option<&Path>, overrides: &SimOverrides) -> Result<(SimConfig, Option<StepArg>, Option<InputRecord>)> {
    let (mut cfg, record) = match config {
        Some(path) => {
            let (cfg, record) = load_json::<SimConfig>(path, "simulation config")?;
            (cfg, Some(record))
        }
        None => (SimConfig::default(), None),
    };
    if let Some(h) = overrides.horizon {
        cfg.horizon = h;
    }
    if let Some(seed) = overrides.seed {
        cfg.seed = seed;
    }
    if let Some(m) = overrides.sat_level {
        cfg.sat_level = Some(m);
    }
    if let Some(v) = overrides.observer_init {
        cfg.observer_init = v;
    }
    cfg.check_stacking |= overrides.check_stacking;
    cfg.force |= overrides.force;
    Ok((cfg, overrides.step, record))
}

/// Everything a distributed run needs, rebuilt from the files.
struct Prepared {
    loaded: Loaded,
    design: ObserverDesign,
    gains: ControllerGains,
    design_file: DesignFile,
    cfg: SimConfig,
}

fn prepare(
    plant: &Path,
    cover: &Path,
    design: &Path,
    config: Option<&Path>,
    overrides: &SimOverrides,
) -> Result<(Prepared, ObserverSystem)> {
    let mut loaded = load_plant_and_cover(plant, cover)?;
    let (design_file, design_record) = load_json::<DesignFile>(design, "design (stage `gains synth`)")?;
    let (design, gains) = design_file.rebuild(&loaded.plant, &loaded.cover, &loaded.pair)?;
    loaded.records.insert("design".into(), design_record);
    let (mut cfg, step, cfg_record) = sim_config(config, overrides)?;
    if let Some(r) = cfg_record {
        loaded.records.insert("config".into(), r);
    }
    if cfg.sat_level.is_none() {
        cfg.sat_level = design_file.sat_level;
    }
    let system = ObserverSystem::new(&loaded.plant, &loaded.cover, &loaded.pair, &design, &gains)?;
    let quadratic = matches!(design_file.gamma_policy, GammaPolicy::Quadratic);
    cfg.step = check_stiffness(&system, step.unwrap_or(StepArg::Fixed(cfg.step)), quadratic);
    Ok((
        Prepared {
            loaded,
            design,
            gains,
            design_file,
            cfg,
        },
        system,
    ))
}

fn run_manifest(command: &str, prepared: &Prepared) -> RunManifest {
    let mut manifest = RunManifest::new(command);
    manifest.inputs = prepared.loaded.records.clone();
    manifest.seeds.insert("x0".into(), prepared.cfg.seed);
    manifest.config = json!({
        "theta": prepared.design.theta,
        "gamma": prepared.design.gamma,
        "sat_level": prepared.cfg.sat_level,
        "step": prepared.cfg.step,
        "horizon": prepared.cfg.horizon,
        "observer_init": prepared.cfg.observer_init,
        "similarity": prepared.design.similarity,
        "force": prepared.cfg.force,
    });
    manifest
}

fn run_summary(result: &SimResult) -> Value {
    json!({
        "performance_index": result.performance_index,
        "steady_state_error": result.steady_state_error,
        "max_state_norm": result.max_state_norm,
        "final_error": result.final_error,
        "peak_estimate": result.peak_estimate,
        "sat_level": if result.sat_level.is_finite() { json!(result.sat_level) } else { Value::Null },
        "saturation_intervals": result.saturation_intervals,
        "step": result.step,
        "steps": result.steps,
        "stacking": result.stacking,
        "warnings": result.warnings,
    })
}

fn sim_run(args: &RunArgs) -> Result<()> {
    let (prepared, system) = prepare(
        &args.plant,
        &args.cover,
        &args.design,
        args.config.as_deref(),
        &args.overrides,
    )?;
    let mut manifest = run_manifest("sim run", &prepared);
    manifest.set("mode", json!(if args.centralized { "centralized" } else { "distributed" }));
    manifest.output("trajectory", &args.out);
    if let Some(s) = &args.summary {
        manifest.output("summary", s);
    }
    let hash = manifest.hash();
    let result = if args.centralized {
        run_centralized(&prepared.loaded.plant, &prepared.gains, &prepared.cfg)?
    } else {
        run_distributed_with(system, &prepared.design, &prepared.cfg)?
    };
    for w in &result.warnings {
        warn(w);
    }
    let (n, _, _) = prepared.loaded.plant.orders();
    let mut out = open_out(&args.out)?;
    write_csv(&result, &mut out, Some(&hash), n)?;
    out.flush()?;
    let summary = run_summary(&result);
    match &args.summary {
        Some(path) => write_stamped(path, &summary, &manifest, &hash)?,
        None => {
            let mut s = summary;
            s["manifest"] = json!(hash);
            print_json(&s);
        }
    }
    Ok(())
}

fn sim_report(args: &ReportArgs) -> Result<()> {
    let (prepared, system) = prepare(
        &args.plant,
        &args.cover,
        &args.design,
        args.config.as_deref(),
        &args.overrides,
    )?;
    let mut manifest = run_manifest("sim report", &prepared);
    if let Some(out) = &args.out {
        manifest.output("report", out);
    }
    let hash = manifest.hash();
    let distributed = run_distributed_with(system, &prepared.design, &prepared.cfg)?;
    let centralized = run_centralized(&prepared.loaded.plant, &prepared.gains, &prepared.cfg)?;
    for w in &distributed.warnings {
        warn(w);
    }
    let l = &prepared.loaded;
    let sets = invariant_set_report(&prepared.design, &prepared.gains, &l.plant, &l.cover, &l.pair, &distributed)?;
    let body = json!({
        "distributed": run_summary(&distributed),
        "centralized_performance_index": centralized.performance_index,
        "performance_gap": distributed.performance_index - centralized.performance_index,
        "invariant_sets": sets,
        "gamma_policy": prepared.design_file.gamma_policy,
    });
    match &args.out {
        Some(path) => write_stamped(path, &body, &manifest, &hash)?,
        None => {
            let mut b = body;
            b["manifest"] = json!(hash);
            print_json(&b);
        }
    }
    Ok(())
}

fn sweep_config(design: &DesignArgs, horizon: f64, step: StepArg, safety: f64, observer_init: f64) -> SweepConfig {
    SweepConfig {
        horizon,
        gamma_policy: design.gamma.policy(),
        observer_poles: design.observer_poles.clone(),
        sat_level: design.sat_level,
        observer_init,
        step: match step {
            StepArg::Fixed(h) => StepPolicy::Fixed { step: h },
            StepArg::Auto => StepPolicy::Auto {
                safety,
                max_step: MAX_AUTO_STEP,
            },
        },
        similarity: design.weight_similarity.into(),
        force: design.force,
    }
}

fn sweep_value(rows: &[crate::simloop::SweepRow]) -> Value {
    json!(rows
        .iter()
        .map(|r| json!({
            "theta": r.theta,
            "gamma": r.gamma,
            "mean": if r.mean.is_finite() { json!(r.mean) } else { Value::Null },
            "failures": r.failures,
            "step": r.step,
            "seconds": r.seconds,
        }))
        .collect::<Vec<_>>())
}

fn sim_sweep(args: &SweepArgs) -> Result<()> {
    let loaded = load_plant_and_cover(&args.plant, &args.cover)?;
    let (gains, poles) = controller(&loaded.plant, &args.design)?;
    let cfg = sweep_config(&args.design, args.horizon, args.step, args.safety, args.observer_init);
    let mut manifest = RunManifest::new("sim sweep");
    manifest.inputs = loaded.records.clone();
    manifest.seeds.insert("x0".into(), args.seed);
    manifest.config = json!({
        "thetas": args.thetas,
        "repeats": args.repeats,
        "sweep": cfg,
        "controller_poles": poles,
        "step": args.step.label(),
    });
    manifest.output("sweep", &args.out);
    let hash = manifest.hash();
    let rows = theta_sweep(
        &loaded.plant,
        &loaded.cover,
        &loaded.pair,
        &gains,
        &args.thetas,
        args.repeats,
        args.seed,
        &cfg,
    )?;
    let mut out = open_out(&args.out)?;
    write_sweep_csv(&rows, &mut out, Some(&hash))?;
    out.flush()?;
    print_json(&json!({ "manifest": hash, "rows": sweep_value(&rows) }));
    Ok(())
}

fn pipeline(args: &PipelineArgs) -> Result<()> {
    let dir = &args.out_dir;
    fs::create_dir_all(dir)?;
    let path = |name: &str| dir.join(name);
    let mut manifest = RunManifest::new("pipeline");

    // net
    let pair = match &args.graph {
        Some(g) => {
            let (file, record) = load_json::<GraphFile>(g, "graph (stage `net`)")?;
            manifest.inputs.insert("graph".into(), record);
            file.to_pair()?
        }
        None => {
            manifest.seeds.insert("network".into(), args.seed);
            generate_pair(args.nodes, !args.random, args.similarity, args.degree, args.seed)?
        }
    };
    // plant and cover
    let plant_file = PlantFile::Microgrid {
        microgrid: MicrogridSpec {
            seed: args.plant_seed,
            coupling_scale: args.coupling_scale,
        },
    };
    manifest.seeds.insert("plant".into(), args.plant_seed);
    manifest.seeds.insert("x0".into(), args.seed);
    let plant = plant_file.resolve(&pair)?;
    let cover = solve(&pair);
    let report = validate(&cover, &pair);
    if !report.is_valid() {
        return Err(Error::Numeric(format!("cover stage produced an invalid cover: {:?}", report.violations)));
    }
    let loaded = Loaded {
        pair,
        cover,
        plant,
        records: BTreeMap::new(),
    };
    // gains
    let (gains, poles) = controller(&loaded.plant, &args.design)?;
    let design = design_at(&loaded, &gains, args.theta, &args.design)?;
    let system = ObserverSystem::new(&loaded.plant, &loaded.cover, &loaded.pair, &design, &gains)?;
    let h = check_stiffness(&system, args.step, args.design.gamma.quadratic_gamma);
    let thetas = args.thetas.clone().unwrap_or_else(|| vec![args.theta]);
    let sweep_cfg = sweep_config(&args.design, args.horizon, args.step, STIFFNESS_SAFETY, 2.0);

    manifest.config = design_config(&design, &args.design, &poles);
    manifest.set("step", json!(h));
    manifest.set("horizon", json!(args.horizon));
    manifest.set("coupling_scale", json!(args.coupling_scale));
    manifest.set("sweep_thetas", json!(thetas));
    manifest.set("sweep_repeats", json!(args.repeats));
    for (key, name) in [
        ("graph", "graph.json"),
        ("plant", "plant.json"),
        ("cover", "cover.json"),
        ("design", "design.json"),
        ("trajectory", "run.csv"),
        ("summary", "summary.json"),
        ("sweep", "sweep.csv"),
        ("manifest", "manifest.json"),
    ] {
        manifest.output(key, &path(name));
    }
    let hash = manifest.hash();

    write_stamped(&path("graph.json"), &loaded.pair.to_file(), &manifest, &hash)?;
    write_stamped(&path("plant.json"), &plant_file, &manifest, &hash)?;
    write_stamped(&path("cover.json"), &CoverFile::new(&loaded.cover, &loaded.pair), &manifest, &hash)?;
    let design_file = DesignFile::new(&design, &gains, args.design.gamma.policy(), &poles, args.design.cross_gain.into());
    write_stamped(&path("design.json"), &design_file, &manifest, &hash)?;

    // sim
    let cfg = SimConfig {
        horizon: args.horizon,
        step: h,
        theta: Some(args.theta),
        gamma_policy: args.design.gamma.policy(),
        sat_level: args.design.sat_level,
        seed: args.seed,
        force: args.design.force,
        ..SimConfig::default()
    };
    let result = run_distributed_with(system, &design, &cfg)?;
    for w in &result.warnings {
        warn(w);
    }
    let centralized = run_centralized(&loaded.plant, &gains, &cfg)?;
    let (n, _, _) = loaded.plant.orders();
    let mut out = open_out(&path("run.csv"))?;
    write_csv(&result, &mut out, Some(&hash), n)?;
    out.flush()?;
    let sets = invariant_set_report(&design, &gains, &loaded.plant, &loaded.cover, &loaded.pair, &result)?;
    let stats = stats_value(&loaded.cover, n)?;
    let summary = json!({
        "cover": stats,
        "distributed": run_summary(&result),
        "centralized_performance_index": centralized.performance_index,
        "invariant_sets": sets,
    });
    write_stamped(&path("summary.json"), &summary, &manifest, &hash)?;

    // sweep
    let rows = theta_sweep(
        &loaded.plant,
        &loaded.cover,
        &loaded.pair,
        &gains,
        &thetas,
        args.repeats,
        args.seed,
        &sweep_cfg,
    )?;
    let mut out = open_out(&path("sweep.csv"))?;
    write_sweep_csv(&rows, &mut out, Some(&hash))?;
    out.flush()?;
    write_stamped(&path("manifest.json"), &json!({}), &manifest, &hash)?;

    print_json(&json!({
        "manifest": hash,
        "out_dir": dir.display().to_string(),
        "performance_index": result.performance_index,
        "centralized_performance_index": centralized.performance_index,
        "steady_state_error": result.steady_state_error,
        "sweep": sweep_value(&rows),
    }));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_arg_parses() {
        assert_eq!("auto".parse::<StepArg>().unwrap(), StepArg::Auto);
        assert_eq!("1e-4".parse::<StepArg>().unwrap(), StepArg::Fixed(1e-4));
        assert!("-1".parse::<StepArg>().is_err());
        assert!("fast".parse::<StepArg>().is_err());
        assert_eq!(StepArg::Auto.resolve(1e6), 0.5e-6);
        assert_eq!(StepArg::Auto.resolve(1.0), MAX_AUTO_STEP);
    }

    #[test]
    fn manifest_hash_is_stable_and_sensitive() {
        let mut a = RunManifest::new("net gen");
        a.seeds.insert("network".into(), 7);
        let b = a.clone();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        a.seeds.insert("network".into(), 8);
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn gamma_flags_map_to_policies() {
        let g = GammaArgs {
            gamma: Some(5.0),
            gamma_factor: 1.1,
            quadratic_gamma: false,
        };
        assert_eq!(g.policy(), GammaPolicy::Bound { factor: 1.1, floor: 5.0 });
        let p = GammaArgs {
            gamma: None,
            gamma_factor: 1.1,
            quadratic_gamma: true,
        };
        assert_eq!(p.policy(), GammaPolicy::Quadratic);
    }

    #[test]
    fn exit_codes_split_input_and_numeric() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::Numeric("x".into())), 1);
        assert_eq!(
            exit_code(&Error::Diverged {
                step: 1,
                time: 0.1,
                reason: "x".into()
            }),
            1
        );
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
