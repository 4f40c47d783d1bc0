//! `priorpath` command-line entry point.
//!
//! Exit codes: 0 on success, 1 on validation errors (bad arguments, missing
//! datasets or checkpoints, malformed inputs), 2 on runtime failures.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use priorpath::checkpoint::{Checkpoint, ModelKind};
use priorpath::data::{self, Dataset, IngestOptions, Split, Stain};
use priorpath::eval::{
    self, compare_models, evaluate_masks, CheckpointModel, ConvEmbedder, Embedder, MetricReport,
    TsneOptions,
};
use priorpath::infer::{infer_fine, infer_rgb, FineOptions, FineOutput};
use priorpath::train::{self, RunOptions, TrainConfig, SUMMARY_FILE};
use priorpath::BinaryMask;
use priorpath_service::{Registry, ServeOptions, ServiceError};

/// Set to a non-empty value other than `0` to make every randomized command
/// require an explicit `--seed`.
const REPRO_ENV: &str = "PRIORPATH_REPRO";

#[derive(Parser)]
#[command(name = "priorpath", version, about = "Tissue mask translation, synthesis and evaluation")]
struct Cli {
    /// Directory holding datasets; `--dataset NAME` resolves to `<root>/NAME`.
    #[arg(long, global = true, env = "PRIORPATH_DATA", default_value = "data")]
    data_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Tile source images into patches and threshold them into fine masks.
    Ingest(IngestArgs),
    /// Derive coarse masks from the fine masks of a dataset.
    MakePairs {
        #[arg(long)]
        dataset: String,
    },
    /// Write a procedural dataset of rendered patches and masks.
    SynthCorpus(SynthArgs),
    /// Train a model on a dataset's training split.
    Train(TrainArgs),
    /// Run a checkpoint on one input image.
    Generate(GenerateArgs),
    /// Score coarse-to-fine checkpoints against a dataset split.
    Evaluate(EvaluateArgs),
    /// Joint t-SNE of real and generated masks with per-cell FID.
    GridReport(GridArgs),
    /// Serve registered checkpoints over HTTP.
    Serve(ServeArgs),
    /// Add a checkpoint to a service registry.
    Register(RegisterArgs),
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    dataset: String,
    /// he or ihc
    #[arg(long, value_parser = Stain::from_str)]
    stain: Stain,
    /// Patch size as HEIGHTxWIDTH.
    #[arg(long, default_value = "512x1024", value_parser = parse_dims)]
    patch: (usize, usize),
    /// Patches with a larger air fraction are dropped.
    #[arg(long, default_value_t = data::DEFAULT_AIR_LIMIT)]
    air_limit: f64,
    /// Gray level at or above which a pixel is air [default: 204 for he, 235 for ihc].
    #[arg(long)]
    threshold: Option<u8>,
    /// Records moved to the test split, grouped by source image.
    #[arg(long, default_value_t = 0)]
    n_test: usize,
    /// Seeds the split [default: 0; required with --n-test when PRIORPATH_REPRO is set].
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    n: usize,
    /// [default: 0; required when PRIORPATH_REPRO is set]
    #[arg(long)]
    seed: Option<u64>,
    /// Patch size as WIDTHxHEIGHT.
    #[arg(long, default_value = "128x64", value_parser = parse_dims)]
    dims: (usize, usize),
    #[arg(long, default_value = "synth")]
    dataset: String,
    /// Test split size [default: n/5].
    #[arg(long)]
    n_test: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Family {
    Pix2pix,
    Cyclegan,
    Hd,
}

impl From<Family> for ModelKind {
    fn from(f: Family) -> Self {
        match f {
            Family::Pix2pix => ModelKind::Pix2pix,
            Family::Cyclegan => ModelKind::Cyclegan,
            Family::Hd => ModelKind::Hd,
        }
    }
}

/// Configuration precedence, lowest first: built-in defaults, the dataset's
/// patch size, flags (`--seed`, `--max-steps`, `--set`), then `--config`.
#[derive(Args)]
struct TrainArgs {
    #[arg(value_enum)]
    family: Family,
    #[arg(long, required_unless_present = "print_config")]
    dataset: Option<String>,
    /// `key = value` lines; `#` starts a comment.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory [default: runs/<dataset>_<family>].
    #[arg(long)]
    out: Option<PathBuf>,
    /// [default: 0; required when PRIORPATH_REPRO is set]
    #[arg(long)]
    seed: Option<u64>,
    /// Stop after this many optimizer steps.
    #[arg(long)]
    max_steps: Option<u64>,
    /// Extra `key=value` settings; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Continue from a checkpoint of the same configuration.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Print the configuration keys with their defaults and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Stage {
    Fine,
    Rgb,
    Pipeline,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(value_enum)]
    stage: Stage,
    /// Mask checkpoint for fine and pipeline, RGB checkpoint for rgb.
    #[arg(long)]
    model: PathBuf,
    /// RGB checkpoint for pipeline.
    #[arg(long)]
    rgb_model: Option<PathBuf>,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Pipeline only: also write the intermediate fine mask.
    #[arg(long)]
    fine_out: Option<PathBuf>,
    /// [default: 0; required when PRIORPATH_REPRO is set]
    #[arg(long)]
    seed: Option<u64>,
    /// Soft value in [0, 1] above which a pixel becomes tissue.
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Fine only: write the soft 8-bit output instead of a binary mask.
    #[arg(long)]
    soft: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    dataset: String,
    /// Comma-separated checkpoints. `reference` scores the ground truth
    /// against itself and `coarse` the unrefined coarse masks.
    #[arg(long, value_delimiter = ',', required = true)]
    models: Vec<String>,
    /// Write the table here; `.json` selects JSON, anything else TSV.
    #[arg(long)]
    report: Option<PathBuf>,
    /// [default: 0; required when PRIORPATH_REPRO is set]
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
}

#[derive(Args)]
struct GridArgs {
    #[arg(long)]
    dataset: String,
    #[arg(long)]
    model: PathBuf,
    /// ROWSxCOLS
    #[arg(long, default_value = "3x3", value_parser = parse_dims)]
    grid: (usize, usize),
    /// Directory for the scatter plot and projected coordinates.
    #[arg(long)]
    plots: Option<PathBuf>,
    /// Write the analysis as JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    min_count: usize,
    #[arg(long, default_value_t = 30.0)]
    perplexity: f64,
    #[arg(long, default_value_t = 1000)]
    iterations: usize,
    /// [default: 0; required when PRIORPATH_REPRO is set]
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    registry: PathBuf,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// Session store [default: <registry>/sessions].
    #[arg(long)]
    sessions: Option<PathBuf>,
}

#[derive(Args)]
struct RegisterArgs {
    #[arg(long)]
    registry: PathBuf,
    #[arg(long)]
    id: String,
    /// Stored as given; relative paths resolve against the registry.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: String,
    #[arg(long, value_parser = Stain::from_str, default_value = "he")]
    stain: Stain,
}

enum Failure {
    Validation(String),
    Runtime(String),
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Validation(m) | Failure::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<priorpath::Error> for Failure {
    fn from(e: priorpath::Error) -> Self {
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

impl From<ServiceError> for Failure {
    fn from(e: ServiceError) -> Self {
        match e {
            ServiceError::Internal(m) => Failure::Runtime(m),
            e => Failure::Validation(e.to_string()),
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn invalid(msg: impl Into<String>) -> Failure {
    Failure::Validation(msg.into())
}

fn parse_dims(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected AxB, got `{s}`"))?;
    let a: usize = a.trim().parse().map_err(|_| format!("bad size `{s}`"))?;
    let b: usize = b.trim().parse().map_err(|_| format!("bad size `{s}`"))?;
    if a == 0 || b == 0 {
        return Err(format!("sizes must be positive, got `{s}`"));
    }
    Ok((a, b))
}

fn repro_mode() -> bool {
    std::env::var(REPRO_ENV).is_ok_and(|v| !v.is_empty() && v != "0")
}

fn seed_or_default(seed: Option<u64>) -> CliResult<u64> {
    match seed {
        Some(s) => Ok(s),
        None if repro_mode() => Err(invalid(format!("--seed is required when {REPRO_ENV} is set"))),
        None => Ok(0),
    }
}

fn open_dataset(root: &Path, name: &str) -> CliResult<Dataset> {
    let dir = Dataset::dir_for(root, name);
    Dataset::open(&dir).map_err(|e| match e {
        priorpath::Error::NotFound(_) => invalid(format!("dataset `{name}` not found at {}", dir.display())),
        e => e.into(),
    })
}

fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    Checkpoint::load(path).map_err(|e| match e {
        priorpath::Error::NotFound(_) => invalid(format!("checkpoint {} not found", path.display())),
        e => e.into(),
    })
}

fn load_mask(path: &Path) -> CliResult<BinaryMask> {
    if !path.is_file() {
        return Err(invalid(format!("input {} not found", path.display())));
    }
    BinaryMask::load_png(path).map_err(|e| invalid(e.to_string()))
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Failure::Runtime(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, bytes).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn to_json<T: serde::Serialize>(v: &T) -> CliResult<String> {
    serde_json::to_string_pretty(v)
        .map(|s| s + "\n")
        .map_err(|e| Failure::Runtime(e.to_string()))
}

/// Nearest-neighbour resample to the checkpoint's native patch size.
fn fit(mask: BinaryMask, ck: &Checkpoint) -> CliResult<BinaryMask> {
    let native = (ck.config.patch_width, ck.config.patch_height);
    if mask.dims() == native {
        return Ok(mask);
    }
    log::warn!(
        "input is {}x{}, resampling to native {}x{}",
        mask.width(),
        mask.height(),
        native.0,
        native.1
    );
    Ok(mask.resize_nearest(native.0, native.1)?)
}

fn cmd_ingest(root: &Path, a: IngestArgs) -> CliResult {
    let seed = if a.n_test > 0 { seed_or_default(a.seed)? } else { a.seed.unwrap_or(0) };
    let (h, w) = a.patch;
    let opts = IngestOptions {
        patch_width: w,
        patch_height: h,
        threshold: a.threshold,
        air_limit: a.air_limit,
        ..IngestOptions::new(a.stain)
    };
    let mut ds = data::ingest(&a.source, Dataset::dir_for(root, &a.dataset), &a.dataset, &opts)?;
    if a.n_test > 0 {
        ds.manifest = data::split_manifest(&ds.manifest, a.n_test, seed)?;
        ds.save()?;
    }
    println!("{} patches in {}", ds.manifest.records.len(), ds.dir.display());
    Ok(())
}

fn cmd_make_pairs(root: &Path, dataset: &str) -> CliResult {
    let ds = open_dataset(root, dataset)?;
    data::build_pairs(&ds)?;
    println!("{} coarse masks written", ds.manifest.records.len());
    Ok(())
}

fn cmd_synth(root: &Path, a: SynthArgs) -> CliResult {
    let seed = seed_or_default(a.seed)?;
    let (w, h) = a.dims;
    let n_test = a.n_test.unwrap_or(a.n / 5);
    let ds = data::synth_dataset(Dataset::dir_for(root, &a.dataset), &a.dataset, a.n, w, h, n_test, seed)?;
    println!("{} records ({n_test} test) in {}", a.n, ds.dir.display());
    Ok(())
}

fn cmd_train(root: &Path, a: TrainArgs) -> CliResult {
    let mut config = TrainConfig::default();
    if a.print_config {
        print!("{}", config.to_kv());
        return Ok(());
    }
    let dataset = a.dataset.as_deref().unwrap_or_default();
    let ds = open_dataset(root, dataset)?;
    config.patch_width = ds.manifest.patch_width;
    config.patch_height = ds.manifest.patch_height;
    config.seed = seed_or_default(a.seed)?;
    config.max_steps = a.max_steps.or(config.max_steps);
    for kv in &a.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| invalid(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        config.set(k.trim(), v.trim())?;
    }
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path).map_err(|_| invalid(format!("config {} not found", path.display())))?;
        config.apply_kv(&text)?;
    }
    config.validate()?;
    let kind = ModelKind::from(a.family);
    let out = a
        .out
        .unwrap_or_else(|| PathBuf::from("runs").join(format!("{dataset}_{kind}")));
    let resume = a.resume.as_deref().map(load_checkpoint).transpose()?;
    let opts = RunOptions {
        out_dir: Some(out.clone()),
        resume,
    };
    let ck = match kind {
        ModelKind::Pix2pix => train::train_pix2pix(&ds.pairs(Split::Train)?, &config, &opts)?,
        ModelKind::Cyclegan => train::train_cyclegan(&ds.pairs(Split::Train)?, &config, &opts)?,
        ModelKind::Hd => train::train_hd(&ds.mask_rgb_pairs(Split::Train)?, &config, &opts)?,
    };
    println!("{kind}: {} steps, {} epochs", ck.step, ck.epoch);
    println!("metrics digest {}", ck.metrics_digest()?);
    println!("summary {}", out.join(SUMMARY_FILE).display());
    Ok(())
}

fn cmd_generate(a: GenerateArgs) -> CliResult {
    let ck = load_checkpoint(&a.model)?;
    let input = load_mask(&a.input)?;
    match a.stage {
        Stage::Fine => {
            let opts = FineOptions {
                binarize: !a.soft,
                threshold: a.threshold,
                ..FineOptions::new(seed_or_default(a.seed)?)
            };
            let out = infer_fine(&ck, &fit(input, &ck)?, &opts)?;
            write_file(&a.out, &out.encode_png()?)?;
        }
        Stage::Rgb => {
            let img = infer_rgb(&ck, &fit(input, &ck)?)?;
            write_file(&a.out, &encode_rgb(&img)?)?;
        }
        Stage::Pipeline => {
            let rgb_path = a
                .rgb_model
                .as_deref()
                .ok_or_else(|| invalid("pipeline needs --rgb-model"))?;
            let rgb_ck = load_checkpoint(rgb_path)?;
            let opts = FineOptions {
                threshold: a.threshold,
                ..FineOptions::new(seed_or_default(a.seed)?)
            };
            let fine = match infer_fine(&ck, &fit(input, &ck)?, &opts)? {
                FineOutput::Mask(m) => m,
                FineOutput::Soft(_) => unreachable!("binarized options"),
            };
            if let Some(p) = &a.fine_out {
                write_file(p, &fine.encode_png()?)?;
            }
            let img = infer_rgb(&rgb_ck, &fit(fine, &rgb_ck)?)?;
            write_file(&a.out, &encode_rgb(&img)?)?;
        }
    }
    Ok(())
}

fn encode_rgb(img: &image::RgbImage) -> CliResult<Vec<u8>> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    Ok(buf.into_inner())
}

fn split_masks(ds: &Dataset, split: Split) -> CliResult<(Vec<BinaryMask>, Vec<BinaryMask>)> {
    let pairs = ds.pairs(split)?;
    if pairs.is_empty() {
        return Err(invalid(format!("dataset `{}` has no {split:?} records", ds.manifest.name)));
    }
    Ok(pairs.into_iter().map(|p| (p.coarse, p.fine)).unzip())
}

fn cmd_evaluate(root: &Path, a: EvaluateArgs) -> CliResult {
    let seed = seed_or_default(a.seed)?;
    let ds = open_dataset(root, &a.dataset)?;
    let (coarse, fine) = split_masks(&ds, a.split.into())?;
    let embedder = ConvEmbedder::default();
    let mut report = MetricReport {
        extractor_id: embedder.id().into(),
        rows: Vec::new(),
    };
    let name = &ds.manifest.name;
    for spec in &a.models {
        let row = match spec.as_str() {
            "reference" => evaluate_masks("reference", name, &fine, &fine, &embedder)?,
            "coarse" => evaluate_masks("coarse", name, &fine, &coarse, &embedder)?,
            path => {
                let ck = load_checkpoint(Path::new(path))?;
                let coarse = coarse.iter().map(|c| fit(c.clone(), &ck)).collect::<CliResult<Vec<_>>>()?;
                let fine = fine.iter().map(|f| fit(f.clone(), &ck)).collect::<CliResult<Vec<_>>>()?;
                let model = CheckpointModel {
                    name: ck.kind.to_string(),
                    checkpoint: &ck,
                };
                let mut r = compare_models(name, &coarse, &fine, &[&model], &embedder, seed)?;
                let mut row = r.rows.remove(0);
                row.method = unique_method(&report, row.method, path);
                row
            }
        };
        report.rows.push(row);
    }
    print!("{}", report.to_tsv());
    if let Some(path) = &a.report {
        let text = if path.extension().is_some_and(|e| e == "json") {
            to_json(&report)?
        } else {
            report.to_tsv()
        };
        write_file(path, text.as_bytes())?;
    }
    Ok(())
}

/// Keeps the family name as the method label unless it already appears.
fn unique_method(report: &MetricReport, method: String, path: &str) -> String {
    if report.rows.iter().any(|r| r.method == method) {
        format!("{method} ({path})")
    } else {
        method
    }
}

fn cmd_grid(root: &Path, a: GridArgs) -> CliResult {
    let seed = seed_or_default(a.seed)?;
    let ds = open_dataset(root, &a.dataset)?;
    let ck = load_checkpoint(&a.model)?;
    let (coarse, fine) = split_masks(&ds, a.split.into())?;
    let opts = FineOptions::new(seed);
    let synth = coarse
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let o = FineOptions {
                seed: seed.wrapping_add(i as u64),
                ..opts
            };
            Ok(infer_fine(&ck, &fit(c.clone(), &ck)?, &o)?
                .into_mask()
                .expect("binarized output"))
        })
        .collect::<CliResult<Vec<_>>>()?;
    let embedder = ConvEmbedder::default();
    let real = eval::embed(&fine, &embedder, "real")?;
    let gen = eval::embed(&synth, &embedder, &ck.kind.to_string())?;
    let joint = real.concat(&gen)?;
    let t = eval::tsne_project(
        &joint.matrix,
        &TsneOptions {
            perplexity: a.perplexity,
            iterations: a.iterations,
            ..TsneOptions::new(seed)
        },
    )?;
    let analysis = eval::grid_similarity(&real, &gen, &t.coords, [a.grid.0, a.grid.1], a.min_count)?;
    let json = to_json(&analysis)?;
    match &a.out {
        Some(p) => write_file(p, json.as_bytes())?,
        None => print!("{json}"),
    }
    if let Some(dir) = &a.plots {
        let img = eval::render_grid_plot(&t.coords, real.n(), &analysis, 600);
        write_file(&dir.join("grid.png"), &encode_rgb(&img)?)?;
        let mut tsv = String::from("population\tx\ty\n");
        for (i, c) in t.coords.iter().enumerate() {
            let pop = if i < real.n() { "real" } else { "synthetic" };
            tsv.push_str(&format!("{pop}\t{}\t{}\n", c[0], c[1]));
        }
        write_file(&dir.join("coords.tsv"), tsv.as_bytes())?;
    }
    Ok(())
}

fn cmd_serve(a: ServeArgs) -> CliResult {
    let rt = tokio::runtime::Runtime::new().map_err(|e| Failure::Runtime(e.to_string()))?;
    rt.block_on(priorpath_service::serve(ServeOptions {
        registry_dir: a.registry,
        session_dir: a.sessions,
        host: a.host,
        port: a.port,
    }))?;
    Ok(())
}

fn cmd_register(a: RegisterArgs) -> CliResult {
    fs::create_dir_all(&a.registry).map_err(|e| Failure::Runtime(format!("{}: {e}", a.registry.display())))?;
    let mut reg = Registry::open(&a.registry)?;
    let entry = reg.register(&a.id, &a.checkpoint, &a.dataset, a.stain)?;
    println!(
        "registered {} ({:?}, {}x{})",
        entry.model_id, entry.stage, entry.width, entry.height
    );
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    let root = cli.data_root.as_path();
    match cli.command {
        Command::Ingest(a) => cmd_ingest(root, a),
        Command::MakePairs { dataset } => cmd_make_pairs(root, &dataset),
        Command::SynthCorpus(a) => cmd_synth(root, a),
        Command::Train(a) => cmd_train(root, a),
        Command::Generate(a) => cmd_generate(a),
        Command::Evaluate(a) => cmd_evaluate(root, a),
        Command::GridReport(a) => cmd_grid(root, a),
        Command::Serve(a) => cmd_serve(a),
        Command::Register(a) => cmd_register(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            match f {
                Failure::Validation(_) => ExitCode::from(1),
                Failure::Runtime(_) => ExitCode::from(2),
            }
        }
    }
}
