//! `loc` — command-line driver for the localization library.
//!
//! Four subcommands cover the whole workflow:
//!
//! * `synth`    — generate a synthetic world (model + queries + ground truth)
//! * `build`    — build or refresh the descriptor search index of a model
//! * `localize` — run the localizer over a query file, emit records
//! * `evaluate` — score a record file against ground truth
//!
//! Exit codes: 0 on success (for `localize`: at least one query registered),
//! 1 on usage errors, 2 on data errors (missing/corrupt/stale files), 3 when
//! `localize` ran cleanly but registered nothing.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use loc_core::ann::{AnnIndex, DEFAULT_LEAF_SIZE};
use loc_core::eval::{self, EvalConfig};
use loc_core::io::{
    load_ground_truth, load_index, load_model, load_queries, save_index, save_world,
    views_file_hash,
};
use loc_core::matching::MatchConfig;
use loc_core::pipeline::{localize_batch, LocalizationRecord, Mode, RunParams, TraceRecord};
use loc_core::pnp::PoseConfig;
use loc_core::synth::{generate_world, QueryPlacement, SynthConfig};

const PRESET_SMOKE: &str = include_str!("../../../presets/smoke.json");
const PRESET_REPETITION_STRESS: &str = include_str!("../../../presets/repetition-stress.json");

#[derive(Parser)]
#[command(
    name = "loc",
    version,
    about = "Camera localization against clustered scene models",
    subcommand_required = true,
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world and write it to a directory.
    Synth(SynthArgs),
    /// Build the descriptor search index for a saved model.
    Build(BuildArgs),
    /// Localize a query file against a saved model.
    Localize(LocalizeArgs),
    /// Score a localization record file against ground truth.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// World configuration as JSON; omitted fields take their defaults.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Named built-in configuration: "smoke" or "repetition-stress".
    #[arg(long)]
    preset: Option<String>,
    /// Override the configuration's random seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (created if missing): model/, queries.bin,
    /// ground_truth.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BuildArgs {
    /// Model directory (as written by `synth`).
    #[arg(long)]
    model: PathBuf,
    /// Maximum number of views per tree leaf.
    #[arg(long, default_value_t = DEFAULT_LEAF_SIZE)]
    leaf_size: usize,
    /// Seed for split-dimension sampling during tree construction.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Rebuild even when the existing index is up to date.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct LocalizeArgs {
    /// Model directory (as written by `synth`).
    #[arg(long)]
    model: PathBuf,
    /// Query file (queries.bin).
    #[arg(long)]
    queries: PathBuf,
    /// Write one JSON record per query to this file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write one JSON trace (votes and cluster visits) per query.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// "fast-voting" (prioritized back-matching) or "full-forward"
    /// (match every feature, keep best buddies).
    #[arg(long, default_value = "fast-voting", value_parser = parse_mode)]
    mode: Mode,
    /// Neighbors retrieved per query feature (the test uses k+1).
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Search budget: maximum tree leaves inspected per lookup.
    #[arg(long, default_value_t = 128)]
    leaves: usize,
    /// Ratio-test threshold, in (0, 1).
    #[arg(long, default_value_t = 0.7)]
    tau: f32,
    /// Forward-matching target: stop sampling features once this many
    /// candidate pairs are collected.
    #[arg(long, default_value_t = 200)]
    nf: usize,
    /// Back-matching target: stop visiting clusters once this many matches
    /// are collected.
    #[arg(long, default_value_t = 200)]
    nb: usize,
    /// Upper bound on back-matched clusters per query.
    #[arg(long, default_value_t = 20)]
    max_backmatch: usize,
    /// Inlier threshold on reprojection error, in pixels.
    #[arg(long, default_value_t = 6.0)]
    epsilon: f64,
    /// Minimum inliers for a pose to count as registered.
    #[arg(long, default_value_t = 12)]
    min_inliers: usize,
    /// Base seed; per-query seeds are derived from it, so results do not
    /// depend on batch order or thread count.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads (0 = one per core).
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Localization records (JSON lines, as written by `localize --out`).
    #[arg(long)]
    records: PathBuf,
    /// Ground truth file (ground_truth.json).
    #[arg(long)]
    truth: PathBuf,
    /// Trace file; with --model, enables place-recognition scoring.
    #[arg(long, requires = "model")]
    traces: Option<PathBuf>,
    /// Model directory, required alongside --traces.
    #[arg(long, requires = "traces")]
    model: Option<PathBuf>,
    /// Shared-point threshold for counting a ranked image as correct.
    #[arg(long, default_value_t = 12)]
    min_shared: usize,
    /// Recognition cutoffs, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1,2,5,10")]
    top_k: Vec<usize>,
    /// Write the report as JSON to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    match s {
        "fast-voting" => Ok(Mode::FastVoting),
        "full-forward" => Ok(Mode::FullForward),
        other => Err(format!("unknown mode '{other}' (expected fast-voting or full-forward)")),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = if err.use_stderr() { 1 } else { 0 };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Synth(args) => run_synth(args),
        Command::Build(args) => run_build(args),
        Command::Localize(args) => run_localize(args),
        Command::Evaluate(args) => run_evaluate(args),
    }
}

// ---------------------------------------------------------------------------
// synth

fn run_synth(args: SynthArgs) -> Result<ExitCode> {
    let mut cfg: SynthConfig = match (&args.config, args.preset.as_deref()) {
        (Some(path), None) => serde_json::from_slice(
            &fs::read(path).with_context(|| format!("reading {}", path.display()))?,
        )
        .with_context(|| format!("parsing {}", path.display()))?,
        (None, Some("smoke")) => serde_json::from_str(PRESET_SMOKE).expect("built-in preset"),
        (None, Some("repetition-stress")) => {
            serde_json::from_str(PRESET_REPETITION_STRESS).expect("built-in preset")
        }
        (None, Some(other)) => {
            bail!("unknown preset '{other}' (expected smoke or repetition-stress)")
        }
        (None, None) => SynthConfig::default(),
        (Some(_), Some(_)) => unreachable!("clap rejects the combination"),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }

    let t = Instant::now();
    let world = generate_world(&cfg).context("generating world")?;
    let elapsed = t.elapsed().as_secs_f64();
    save_world(&world, &args.out).with_context(|| format!("writing {}", args.out.display()))?;

    let model = &world.model;
    let (mut on_patch, mut in_gap, mut free) = (0usize, 0usize, 0usize);
    for p in &world.placements {
        match p {
            QueryPlacement::Patch(_) => on_patch += 1,
            QueryPlacement::Gap(_) => in_gap += 1,
            QueryPlacement::Free => free += 1,
        }
    }
    println!(
        "world written to {}\n\
         points             {}\n\
         views              {}\n\
         model images       {}\n\
         clusters           {}\n\
         queries            {} ({on_patch} on patches, {in_gap} in gaps, {free} free)\n\
         repeated points    {}\n\
         dropped points     {}\n\
         generated in       {elapsed:.2}s",
        args.out.display(),
        model.points().len(),
        model.views().len(),
        model.images().len(),
        model.clustering().num_clusters,
        world.queries.len(),
        world.repetition.len(),
        world.dropped_points,
    );
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// build

fn run_build(args: BuildArgs) -> Result<ExitCode> {
    let index_path = args.model.join("index.bin");
    let views_hash = views_file_hash(&args.model)
        .with_context(|| format!("hashing views of {}", args.model.display()))?;

    if !args.force && index_path.exists() {
        match load_index(&index_path) {
            Ok((existing, stored_hash))
                if stored_hash == views_hash && existing.leaf_size() == args.leaf_size =>
            {
                println!(
                    "index up to date ({} leaves, view data unchanged); skipping rebuild",
                    existing.num_leaves()
                );
                return Ok(ExitCode::SUCCESS);
            }
            Ok(_) => println!("existing index is stale; rebuilding"),
            Err(err) => println!("existing index is unreadable ({err}); rebuilding"),
        }
    }

    let model = load_model(&args.model)
        .with_context(|| format!("loading model {}", args.model.display()))?;
    let t = Instant::now();
    let index = AnnIndex::for_model(&model, args.leaf_size, args.seed).context("building index")?;
    let elapsed = t.elapsed().as_secs_f64();
    save_index(&index, &views_hash, &index_path)
        .with_context(|| format!("writing {}", index_path.display()))?;
    println!(
        "index written to {} ({} views, {} leaves, built in {elapsed:.2}s)",
        index_path.display(),
        model.views().len(),
        index.num_leaves()
    );
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// localize

fn run_localize(args: LocalizeArgs) -> Result<ExitCode> {
    if args.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(args.threads)
            .build_global()
            .context("configuring thread pool")?;
    }

    let model = load_model(&args.model)
        .with_context(|| format!("loading model {}", args.model.display()))?;
    let queries = load_queries(&args.queries)
        .with_context(|| format!("loading queries {}", args.queries.display()))?;

    let index_path = args.model.join("index.bin");
    let views_hash = views_file_hash(&args.model)?;
    let index = if index_path.exists() {
        let (index, stored_hash) = load_index(&index_path)
            .with_context(|| format!("loading index {}", index_path.display()))?;
        if stored_hash != views_hash {
            bail!("{} was built from different view data; rerun `loc build`", index_path.display());
        }
        index
    } else {
        eprintln!("note: no index.bin in {}; building one in memory", args.model.display());
        AnnIndex::for_model(&model, DEFAULT_LEAF_SIZE, 0).context("building index")?
    };

    let match_cfg = MatchConfig {
        k: args.k,
        tau: args.tau,
        n_forward: args.nf,
        n_back: args.nb,
        max_visited: args.max_backmatch,
        seed: args.seed,
    };
    match_cfg.validate().context("invalid matching parameters")?;
    let pose_cfg = PoseConfig {
        epsilon_px: args.epsilon,
        min_inliers: args.min_inliers,
        seed: args.seed,
        ..PoseConfig::default()
    };
    let params = RunParams { mode: args.mode, match_cfg, pose_cfg, max_leaves: args.leaves };

    let t = Instant::now();
    let results = localize_batch(&model, &index, &queries, &params)?;
    let wall = t.elapsed().as_secs_f64();

    println!(
        "{:>6}  {:<22} {:>8} {:>9} {:>9} {:>9}",
        "query", "status", "inliers", "corresp", "visited", "ms"
    );
    for (rec, _) in &results {
        println!(
            "{:>6}  {:<22} {:>8} {:>9} {:>9} {:>9.2}",
            rec.query_id,
            rec.status,
            rec.num_inliers,
            rec.num_correspondences,
            rec.clusters_visited,
            rec.timings.total_s * 1e3,
        );
    }
    let registered = results.iter().filter(|(r, _)| r.success).count();
    println!(
        "registered {registered}/{} queries ({:.1}%) in {wall:.2}s [{}]",
        results.len(),
        100.0 * registered as f64 / results.len().max(1) as f64,
        params.mode,
    );

    if let Some(path) = &args.out {
        write_jsonl(path, results.iter().map(|(r, _)| r))
            .with_context(|| format!("writing {}", path.display()))?;
        println!("records written to {}", path.display());
    }
    if let Some(path) = &args.trace {
        write_jsonl(path, results.iter().map(|(_, t)| t))
            .with_context(|| format!("writing {}", path.display()))?;
        println!("traces written to {}", path.display());
    }

    Ok(if registered > 0 { ExitCode::SUCCESS } else { ExitCode::from(3) })
}

fn write_jsonl<T: serde::Serialize>(path: &Path, items: impl Iterator<Item = T>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut out, &item)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let reader =
        BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .with_context(|| format!("{} line {}", path.display(), i + 1))?,
        );
    }
    Ok(out)
}

fn run_evaluate(args: EvaluateArgs) -> Result<ExitCode> {
    let records: Vec<LocalizationRecord> = read_jsonl(&args.records)?;
    let truth = load_ground_truth(&args.truth)
        .with_context(|| format!("loading {}", args.truth.display()))?;

    let loaded = match (&args.traces, &args.model) {
        (Some(traces_path), Some(model_dir)) => {
            let traces: Vec<TraceRecord> = read_jsonl(traces_path)?;
            let model = load_model(model_dir)
                .with_context(|| format!("loading model {}", model_dir.display()))?;
            Some((traces, model))
        }
        _ => None,
    };

    let cfg = EvalConfig { top_ks: args.top_k.clone(), min_shared_points: args.min_shared };
    let report = eval::evaluate(
        &records,
        &truth.queries,
        loaded.as_ref().map(|(t, m)| (t.as_slice(), m)),
        &cfg,
    )?;
    print!("{}", eval::render_text(&report));
    if let Some(path) = &args.out {
        fs::write(path, serde_json::to_vec_pretty(&report)?)
            .with_context(|| format!("writing {}", path.display()))?;
        println!("report written to {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}
