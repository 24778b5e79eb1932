//! Command-line entry point: scan orders, schedules, masks, training,
//! sampling, synthetic-distribution oracles, and experiment runs.
//!
//! Every subcommand exits 0 on success. Failures print a single
//! `error: ...` line on stderr and exit nonzero.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use checkerboard_core::checkpoint;
use checkerboard_core::experiment::{
    emit_plots, run_experiment, run_training, ExperimentConfig,
};
use checkerboard_core::model::ModelParams;
use checkerboard_core::oracle::{
    binomial_ci_half_width, enumerate_exact, tv_estimate, DistributionEstimate,
    GridDistribution, ProbTable,
};
use checkerboard_core::order::{scan_order, Position, ScanOrder};
use checkerboard_core::resample::TokenGrid;
use checkerboard_core::sampler::{Sampler, SamplerConfig};
use checkerboard_core::schedule::{make_schedule, partition_blocks, RatioTag};

/// Seed override honored by every command that reads a seed from a config
/// file; an explicit `--seed` flag still wins over the environment.
const SEED_ENV: &str = "CHECKERBOARD_SEED";

#[derive(Parser)]
#[command(
    name = "checkerboard",
    about = "Progressive-checkerboard multiscale autoregressive sampling toolkit",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Scan-order generation and validation.
    #[command(subcommand)]
    Order(OrderCmd),
    /// Scale schedules and block partitions.
    #[command(subcommand)]
    Schedule(ScheduleCmd),
    /// Block-causal visibility masks.
    #[command(subcommand)]
    Mask(MaskCmd),
    /// Train a model from an experiment config.
    Train(TrainArgs),
    /// Draw one grid from a trained checkpoint.
    Sample(SampleArgs),
    /// Exact references for synthetic grid distributions.
    #[command(subcommand)]
    Oracle(OracleCmd),
    /// Inspect rotary-mixing parameters of a checkpoint.
    #[command(subcommand)]
    Rope(RopeCmd),
    /// Full train/sample/evaluate runs.
    #[command(subcommand)]
    Experiment(ExperimentCmd),
    /// Plot-data emission from finished runs.
    #[command(subcommand)]
    Plots(PlotsCmd),
}

#[derive(Subcommand)]
enum OrderCmd {
    /// Generate a scan order and write it as a JSON array of [x, y] pairs.
    Gen(OrderGenArgs),
    /// Validate a scan-order file; exits nonzero on any violated invariant.
    Check(OrderCheckArgs),
}

#[derive(Args)]
struct OrderGenArgs {
    /// Square grid side (height/width override it for rectangular grids).
    #[arg(long)]
    side: usize,
    /// Grid height (defaults to --side).
    #[arg(long)]
    height: Option<usize>,
    /// Grid width (defaults to --side).
    #[arg(long)]
    width: Option<usize>,
    /// Output JSON file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct OrderCheckArgs {
    /// Scan-order JSON file (array of [x, y] pairs).
    #[arg(long = "in")]
    input: PathBuf,
}

#[derive(Subcommand)]
enum ScheduleCmd {
    /// Print scale sizes, per-scale step counts, and totals as JSON.
    Show(ScheduleShowArgs),
}

#[derive(Args)]
struct ScheduleShowArgs {
    /// Scale-up ratio between consecutive grids.
    #[arg(long)]
    ratio: RatioTag,
    /// Final grid side.
    #[arg(long)]
    side: usize,
    /// Blocks per scale (capped by each scale's cell count).
    #[arg(long, default_value_t = 1)]
    p: usize,
}

#[derive(Subcommand)]
enum MaskCmd {
    /// Write the visibility relation as a JSON list of per-row [start, end) pairs.
    Dump(MaskDumpArgs),
}

#[derive(Args)]
struct MaskDumpArgs {
    /// Scale-up ratio between consecutive grids.
    #[arg(long)]
    ratio: RatioTag,
    /// Final grid side.
    #[arg(long)]
    side: usize,
    /// Blocks per scale.
    #[arg(long, default_value_t = 1)]
    p: usize,
    /// Output JSON file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment config JSON (the sampler section is kept for later stages).
    #[arg(long)]
    config: PathBuf,
    /// Override the training seed (beats CHECKERBOARD_SEED and the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for config/order/mask/loss/checkpoint artifacts.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SampleArgs {
    /// Trained model checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Class label to condition on.
    #[arg(long)]
    class: usize,
    /// Blocks per scale.
    #[arg(long, default_value_t = 1)]
    p: usize,
    /// Guidance scale (1 = no guidance).
    #[arg(long, default_value_t = 1.0)]
    cfg: f64,
    /// Early steps sampled without guidance (default: every scale of side <= 2).
    #[arg(long)]
    warmup: Option<usize>,
    /// Softmax temperature.
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    /// Sampling seed (beats CHECKERBOARD_SEED; default 0).
    #[arg(long)]
    seed: Option<u64>,
    /// Output grid JSON file.
    #[arg(long)]
    out: PathBuf,
    /// Optional per-token trace CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Subcommand)]
enum OracleCmd {
    /// Enumerate exact per-class probability tables for a preset distribution.
    Enumerate(OracleEnumerateArgs),
    /// Score a sample file against an enumerated table (prints TV and CI).
    Eval(OracleEvalArgs),
}

#[derive(Args)]
struct OracleEnumerateArgs {
    /// Distribution preset: independent, ising, or patchwork.
    #[arg(long)]
    kind: String,
    /// Grid side.
    #[arg(long)]
    side: usize,
    /// Nearest-neighbor coupling (ising only).
    #[arg(long, default_value_t = 0.5)]
    j: f64,
    /// Per-class field strength (independent and ising).
    #[arg(long, default_value_t = 0.4)]
    h: f64,
    /// Quadrant tilt strength (patchwork only).
    #[arg(long, default_value_t = 0.6)]
    strength: f64,
    /// Token vocabulary size (patchwork only; the binary presets use 2).
    #[arg(long, default_value_t = 2)]
    vocab: usize,
    /// Number of class labels.
    #[arg(long, default_value_t = 2)]
    classes: usize,
    /// Output table JSON file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct OracleEvalArgs {
    /// JSON array of sampled grids ({side, tokens} objects).
    #[arg(long)]
    samples: PathBuf,
    /// Table file written by `oracle enumerate`.
    #[arg(long)]
    table: PathBuf,
    /// Class whose table the samples are scored against.
    #[arg(long, default_value_t = 0)]
    class: usize,
}

#[derive(Subcommand)]
enum RopeCmd {
    /// Print per-layer, per-head key-rotation mixing weights as CSV.
    Inspect(RopeInspectArgs),
}

#[derive(Args)]
struct RopeInspectArgs {
    /// Trained model checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Subcommand)]
enum ExperimentCmd {
    /// Run every stage (train, sample, evaluate, manifest) from a config.
    Run(ExperimentRunArgs),
}

#[derive(Args)]
struct ExperimentRunArgs {
    /// Experiment config JSON; may carry an "out_dir" field.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (beats the config's out_dir; default runs/<name>).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum PlotsCmd {
    /// Write gnuplot-ready .dat files aggregated over finished runs.
    Emit(PlotsEmitArgs),
}

#[derive(Args)]
struct PlotsEmitArgs {
    /// Directory holding one subdirectory per finished run.
    #[arg(long)]
    runs: PathBuf,
    /// Output directory for the .dat files.
    #[arg(long)]
    out: PathBuf,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                std::process::exit(0);
            }
            let line = e.to_string();
            let first = line.lines().next().unwrap_or("invalid arguments");
            eprintln!("{first} (run with --help for usage)");
            std::process::exit(2);
        }
    };
    if let Err(e) = run(cli) {
        // One line, chain joined by ": ".
        eprintln!("error: {:#}", e);
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Order(OrderCmd::Gen(args)) => order_gen(args),
        Command::Order(OrderCmd::Check(args)) => order_check(args),
        Command::Schedule(ScheduleCmd::Show(args)) => schedule_show(args),
        Command::Mask(MaskCmd::Dump(args)) => mask_dump(args),
        Command::Train(args) => train_cmd(args),
        Command::Sample(args) => sample_cmd(args),
        Command::Oracle(OracleCmd::Enumerate(args)) => oracle_enumerate(args),
        Command::Oracle(OracleCmd::Eval(args)) => oracle_eval(args),
        Command::Rope(RopeCmd::Inspect(args)) => rope_inspect(args),
        Command::Experiment(ExperimentCmd::Run(args)) => experiment_run(args),
        Command::Plots(PlotsCmd::Emit(args)) => plots_emit(args),
    }
}

/// Environment seed override, if set and well-formed.
fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => {
            let seed = v
                .trim()
                .parse::<u64>()
                .with_context(|| format!("{SEED_ENV} must be an unsigned integer, got {v:?}"))?;
            Ok(Some(seed))
        }
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(e).context(format!("reading {SEED_ENV}")),
    }
}

/// Precedence: explicit flag, then CHECKERBOARD_SEED, then the config value.
fn resolve_seed(flag: Option<u64>, config_value: u64) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    Ok(env_seed()?.unwrap_or(config_value))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn order_gen(args: OrderGenArgs) -> Result<()> {
    if args.side == 0 {
        bail!("--side must be positive");
    }
    let height = args.height.unwrap_or(args.side);
    let width = args.width.unwrap_or(args.side);
    let order = scan_order(height, width)?;
    let pairs: Vec<[usize; 2]> = order.positions.iter().map(|p| [p.x, p.y]).collect();
    write_json(&args.out, &pairs)?;
    println!("wrote {} ({} cells, {}x{})", args.out.display(), pairs.len(), height, width);
    Ok(())
}

fn order_check(args: OrderCheckArgs) -> Result<()> {
    let pairs: Vec<[usize; 2]> = read_json(&args.input)?;
    if pairs.is_empty() {
        bail!("{}: order is empty", args.input.display());
    }
    let width = pairs.iter().map(|p| p[0]).max().unwrap() + 1;
    let height = pairs.iter().map(|p| p[1]).max().unwrap() + 1;
    let side = height.max(width).next_power_of_two();
    let positions: Vec<Position> = pairs.iter().map(|&[x, y]| Position::new(x, y)).collect();
    // Permutation is validated on construction; balance and half-parity on
    // power-of-two squares are validated explicitly.
    let order = ScanOrder::from_positions(side, height, width, positions)
        .with_context(|| format!("{}: not a valid scan order", args.input.display()))?;
    order
        .validate()
        .with_context(|| format!("{}: invariant violated", args.input.display()))?;
    println!("ok ({} cells, {}x{})", order.len(), height, width);
    Ok(())
}

#[derive(Serialize)]
struct ScheduleView {
    ratio: String,
    side: usize,
    sizes: Vec<usize>,
    parallelism: usize,
    blocks_per_scale: Vec<usize>,
    steps_per_scale: Vec<usize>,
    total_steps: usize,
    total_cells: usize,
}

fn schedule_show(args: ScheduleShowArgs) -> Result<()> {
    let schedule = make_schedule(args.ratio, args.side)?;
    let partition = partition_blocks(&schedule, args.p)?;
    let blocks_per_scale = partition.blocks.iter().map(|b| b.len()).collect();
    let view = ScheduleView {
        ratio: args.ratio.to_string(),
        side: args.side,
        sizes: schedule.sizes.clone(),
        parallelism: args.p,
        blocks_per_scale,
        steps_per_scale: partition.steps_per_scale.clone(),
        total_steps: partition.total_steps(),
        total_cells: schedule.total_cells(),
    };
    println!("{}", serde_json::to_string_pretty(&view)?);
    Ok(())
}

fn mask_dump(args: MaskDumpArgs) -> Result<()> {
    let schedule = make_schedule(args.ratio, args.side)?;
    let partition = partition_blocks(&schedule, args.p)?;
    let layout = checkerboard_core::layout::build_layout(&partition)?;
    let mask = checkerboard_core::layout::build_mask(&layout);
    let rows: Vec<[usize; 2]> = (0..layout.seq_len).map(|q| [0, mask.visible_end(q)]).collect();
    write_json(&args.out, &rows)?;
    println!("wrote {} ({} rows)", args.out.display(), rows.len());
    Ok(())
}

fn train_cmd(args: TrainArgs) -> Result<()> {
    let mut config: ExperimentConfig = read_json(&args.config)?;
    config.train.seed = resolve_seed(args.seed, config.train.seed)?;
    let (_, final_loss) = run_training(&config, &args.out)?;
    println!(
        "trained {} steps, final loss {:.6}, checkpoint {}",
        config.train.steps,
        final_loss,
        args.out.join("model.ckbd").display()
    );
    Ok(())
}

/// Per-token trace rows: one line per sampled cell in generation order.
fn trace_csv(trace: &checkerboard_core::sampler::SampleTrace) -> String {
    let mut out = String::from("step,scale,block,x,y,token,entropy_nats\n");
    for r in &trace.records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.step, r.scale, r.block, r.x, r.y, r.token, r.entropy
        ));
    }
    out
}

fn sample_cmd(args: SampleArgs) -> Result<()> {
    let params: ModelParams<f64> = checkpoint::load(&args.checkpoint)
        .with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let seed = resolve_seed(args.seed, 0)?;
    let sampler_config = SamplerConfig {
        parallelism: args.p,
        cfg_scale: args.cfg,
        cfg_warmup_steps: args.warmup,
        temperature: args.temperature,
        seed,
    };
    let sampler = Sampler::new(&params, sampler_config)?;
    let (grid, trace) = sampler.sample(args.class, 0)?;
    write_json(&args.out, &grid)?;
    if let Some(trace_path) = &args.trace {
        if let Some(parent) = trace_path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        fs::write(trace_path, trace_csv(&trace))
            .with_context(|| format!("writing {}", trace_path.display()))?;
    }
    println!(
        "wrote {} (side {}, {} steps, class {})",
        args.out.display(),
        grid.side,
        trace.total_steps(),
        args.class
    );
    Ok(())
}

/// Exact per-class tables plus the distribution they came from.
#[derive(Serialize, Deserialize)]
struct TableFile {
    distribution: GridDistribution,
    tables: Vec<ProbTable>,
}

fn oracle_enumerate(args: OracleEnumerateArgs) -> Result<()> {
    let dist = match args.kind.as_str() {
        "independent" => {
            if args.vocab != 2 {
                bail!("--kind independent is a binary preset; --vocab must be 2");
            }
            GridDistribution::independent_binary(args.side, args.h, args.classes)
        }
        "ising" => {
            if args.vocab != 2 {
                bail!("--kind ising is a binary preset; --vocab must be 2");
            }
            GridDistribution::coupled_binary(args.side, args.j, args.h, args.classes)
        }
        "patchwork" => GridDistribution::patchwork_rotations(
            args.side,
            args.vocab,
            args.strength,
            args.classes,
        ),
        other => bail!("unknown distribution kind {other:?} (independent, ising, patchwork)"),
    };
    let tables = (0..dist.classes())
        .map(|class| enumerate_exact(&dist, class))
        .collect::<checkerboard_core::Result<Vec<_>>>()?;
    let states = tables.first().map_or(0, |t| t.probs.len());
    write_json(&args.out, &TableFile { distribution: dist, tables })?;
    println!("wrote {} ({} classes, {} states each)", args.out.display(), args.classes, states);
    Ok(())
}

fn oracle_eval(args: OracleEvalArgs) -> Result<()> {
    let grids: Vec<TokenGrid> = read_json(&args.samples)?;
    let table_file: TableFile = read_json(&args.table)?;
    let table = table_file
        .tables
        .get(args.class)
        .ok_or_else(|| {
            anyhow::anyhow!("table has {} classes, no class {}", table_file.tables.len(), args.class)
        })?;
    let est = DistributionEstimate::from_grids(&grids, table.side, table.vocab)?;
    let tv = tv_estimate(&est, table)?;
    let ci = binomial_ci_half_width(grids.len());
    println!(
        "tv={tv:.6} ci95={ci:.6} n={} class={} states={}",
        grids.len(),
        args.class,
        table.probs.len()
    );
    Ok(())
}

fn rope_inspect(args: RopeInspectArgs) -> Result<()> {
    let params: ModelParams<f64> = checkpoint::load(&args.checkpoint)
        .with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let mix = &params.mix;
    println!("layer,head,alpha");
    for layer in 0..mix.layers {
        for head in 0..mix.heads {
            let logit = mix.logit(layer, head);
            let alpha = 1.0 / (1.0 + (-logit).exp());
            println!("{layer},{head},{alpha}");
        }
    }
    Ok(())
}

/// On-disk experiment spec: the core config plus an optional output directory.
#[derive(Deserialize)]
struct RunSpec {
    #[serde(flatten)]
    experiment: ExperimentConfig,
    #[serde(default)]
    out_dir: Option<PathBuf>,
}

fn experiment_run(args: ExperimentRunArgs) -> Result<()> {
    let spec: RunSpec = read_json(&args.config)?;
    let mut config = spec.experiment;
    if let Some(seed) = env_seed()? {
        config.train.seed = seed;
        config.sampler.seed = seed;
        config.data_seed = seed;
    }
    let dir = args
        .out
        .or(spec.out_dir)
        .unwrap_or_else(|| PathBuf::from("runs").join(&config.name));
    let report = run_experiment(&config, &dir)?;
    println!(
        "run {} done: {} steps, final loss {:.4}, mean patch TV {:.4}{}",
        report.name,
        report.total_steps,
        report.final_loss,
        report.mean_patch_tv,
        report
            .mean_full_grid_tv
            .map_or(String::new(), |tv| format!(", mean full-grid TV {tv:.4}")),
    );
    println!("artifacts: {}", dir.display());
    Ok(())
}

fn plots_emit(args: PlotsEmitArgs) -> Result<()> {
    emit_plots(&args.runs, &args.out)?;
    for name in ["tv_vs_total_steps.dat", "tv_vs_steps_per_scale.dat", "entropy_by_step.dat"] {
        let path = args.out.join(name);
        if !path.exists() {
            bail!("expected plot file {} was not written", path.display());
        }
        println!("wrote {}", path.display());
    }
    Ok(())
}
