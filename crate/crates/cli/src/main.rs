use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use countshift_core::dataio::{
    assign_splits, generate_scene, load_dataset, load_dataset_unlabeled, save_patch, write_manifest, Domain,
    Manifest, RoofStyle, SceneConfig, Split, MANIFEST_VERSION,
};
use countshift_core::eval::{dump_heatmaps, predict_density, run_sweep, SweepGrid, SweepOptions};
use countshift_core::trainer::{adapt, train_source_from, AdaptConfig};
use countshift_core::{evaluate_mre, Dataset, Error, Model, Stage};

const EXIT_OTHER: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_DATASET: u8 = 3;
const EXIT_DIVERGED: u8 = 4;

const MODEL_FILE: &str = "model.bin";
const RUN_MANIFEST: &str = "run.json";

#[derive(Parser)]
#[command(name = "countshift", version, about = "Building counting with cross-region adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Train the regressor on an annotated source dataset.
    TrainSource(TrainSourceArgs),
    /// Adapt a model to an unannotated target dataset.
    Adapt(AdaptArgs),
    /// Count-error evaluation of a model on an annotated split.
    Eval(EvalArgs),
    /// ω-driven selection of alpha, lambda1 and lambda2.
    Sweep(SweepArgs),
}

#[derive(Args, Serialize)]
struct GenArgs {
    #[arg(long, value_parser = parse_domain)]
    domain: Domain,
    #[arg(long)]
    n: usize,
    /// Patch side length in pixels.
    #[arg(long, default_value_t = 128)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    count_min: Option<usize>,
    #[arg(long)]
    count_max: Option<usize>,
    #[arg(long)]
    size_min: Option<f64>,
    #[arg(long)]
    size_max: Option<f64>,
    #[arg(long)]
    irregularity: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    contrast: Option<f64>,
    #[arg(long, value_parser = parse_roof)]
    roof: Option<RoofStyle>,
}

#[derive(Args, Serialize)]
struct TrainSourceArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 26)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Continue from an existing model instead of a fresh initialization.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Fill the seconds column of the training log.
    #[arg(long)]
    record_time: bool,
}

#[derive(Args, Serialize)]
struct AdaptArgs {
    #[arg(long, value_parser = parse_adapt_stage)]
    stage: Stage,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    #[arg(long, default_value_t = 45.0)]
    lambda1: f64,
    #[arg(long, default_value_t = 1.0 / 26.0)]
    lambda2: f64,
    #[arg(long, default_value_t = 0.0)]
    margin: f64,
    #[arg(long, default_value_t = 5.0)]
    pair_threshold: f64,
    #[arg(long, default_value_t = 0.8)]
    sub_fraction: f64,
    #[arg(long, default_value_t = 15)]
    epochs: usize,
    /// Regressor learning rate.
    #[arg(long, default_value_t = 1e-5)]
    lr: f64,
    /// Discriminator learning rate; defaults to --lr.
    #[arg(long)]
    disc_lr: Option<f64>,
    #[arg(long, default_value_t = 26)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    record_time: bool,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    split: Split,
    #[arg(long)]
    out: PathBuf,
    /// Also write every predicted density map as a PGM under maps/.
    #[arg(long)]
    dump_maps: bool,
}

#[derive(Args, Serialize)]
struct SweepArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    /// JSON {"alpha": [..], "lambda1": [..], "lambda2": [..]}; omitted keys use the default grids.
    #[arg(long)]
    grid: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    subset_frac: f64,
    #[arg(long, default_value_t = 15)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-5)]
    lr: f64,
    #[arg(long)]
    disc_lr: Option<f64>,
    #[arg(long, default_value_t = 26)]
    batch: usize,
    #[arg(long, default_value_t = 0.0)]
    margin: f64,
    #[arg(long, default_value_t = 5.0)]
    pair_threshold: f64,
    #[arg(long, default_value_t = 0.8)]
    sub_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Stop launching candidates after this many seconds; the report is then marked incomplete.
    #[arg(long)]
    budget_seconds: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_domain(s: &str) -> Result<Domain, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_split(s: &str) -> Result<Split, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_adapt_stage(s: &str) -> Result<Stage, String> {
    match s.parse::<Stage>() {
        Ok(Stage::Source) => Err("use train-source for the source stage".into()),
        Ok(st) => Ok(st),
        Err(e) => Err(e.to_string()),
    }
}

fn parse_roof(s: &str) -> Result<RoofStyle, String> {
    match s {
        "shaded" => Ok(RoofStyle::Shaded),
        "flat" => Ok(RoofStyle::Flat),
        other => Err(format!("unknown roof style {other:?}")),
    }
}

/// Provenance record written next to every command's outputs. Everything
/// except `timing` is a pure function of the inputs.
struct RunManifest {
    command: String,
    args: Value,
    config: Value,
    seed: Option<u64>,
    inputs: BTreeMap<String, Value>,
    outputs: BTreeMap<String, Value>,
    started: Instant,
}

impl RunManifest {
    fn new(command: &str, args: &impl Serialize, seed: Option<u64>) -> Self {
        RunManifest {
            command: command.into(),
            args: serde_json::to_value(args).unwrap_or(Value::Null),
            config: Value::Null,
            seed,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            started: Instant::now(),
        }
    }

    fn input_dataset(&mut self, name: &str, ds: &Dataset) {
        self.inputs.insert(
            name.into(),
            json!({"path": ds.root, "split": ds.split, "items": ds.len(), "sha256": ds.content_hash()}),
        );
    }

    fn input_file(&mut self, name: &str, path: &Path) -> Result<(), Error> {
        self.inputs.insert(name.into(), json!({"path": path, "sha256": file_hash(path)?}));
        Ok(())
    }

    fn output(&mut self, name: &str, path: &Path) -> Result<(), Error> {
        self.outputs.insert(name.into(), json!({"path": path, "sha256": file_hash(path)?}));
        Ok(())
    }

    fn write(self, dir: &Path) -> Result<(), Error> {
        let record = json!({
            "tool": env!("CARGO_PKG_NAME"),
            "version": env!("CARGO_PKG_VERSION"),
            "command": self.command,
            "args": self.args,
            "config": self.config,
            "seed": self.seed,
            "inputs": self.inputs,
            "outputs": self.outputs,
        });
        let digest = hex(&Sha256::digest(serde_json::to_vec(&record)?));
        let mut full = record;
        full["manifest_sha256"] = json!(digest);
        // excluded from the digest above
        let unix = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        full["timing"] = json!({"finished_unix": unix, "wall_seconds": self.started.elapsed().as_secs_f64()});
        write_text(&dir.join(RUN_MANIFEST), &(serde_json::to_string_pretty(&full)? + "\n"))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn file_hash(path: &Path) -> Result<String, Error> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(hex(&Sha256::digest(bytes)))
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn make_dir(path: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

/// Test split with annotations when every item has one.
fn labelled_split(root: &Path, split: Split) -> Option<Dataset> {
    let ds = load_dataset(root, split).ok()?;
    ds.items.iter().all(|it| it.annotation.is_some()).then_some(ds)
}

fn cmd_gen(args: GenArgs) -> Result<(), Error> {
    let mut base = SceneConfig::for_domain(args.domain, args.seed);
    base.patch_size = args.size;
    macro_rules! set {
        ($($f:ident),*) => { $(if let Some(v) = args.$f { base.$f = v; })* };
    }
    set!(count_min, count_max, size_min, size_max, irregularity, noise, contrast, roof);
    base.validate()?;
    make_dir(&args.out)?;
    let mut run = RunManifest::new("gen", &args, Some(args.seed));
    run.config = serde_json::to_value(&base)?;
    let mut ids = Vec::with_capacity(args.n);
    for i in 0..args.n as u64 {
        let cfg = SceneConfig {
            seed: args.seed.wrapping_mul(1_000_003).wrapping_add(i),
            ..base.clone()
        };
        let patch = generate_scene(&cfg);
        save_patch(&patch, &args.out)?;
        ids.push(patch.id);
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        domain: args.domain,
        splits: assign_splits(&ids, [60, 20, 20]),
    };
    let path = write_manifest(&args.out, &manifest)?;
    run.output("manifest", &path)?;
    run.write(&args.out)
}

fn write_model_outputs(
    run: &mut RunManifest,
    out: &Path,
    model: &Model,
    log: &countshift_core::TrainLog,
) -> Result<(), Error> {
    let model_path = out.join(MODEL_FILE);
    model.save(&model_path)?;
    run.output("model", &model_path)?;
    let log_path = out.join("train_log.csv");
    log.write_csv(&log_path)?;
    run.output("train_log", &log_path)
}

fn cmd_train_source(args: TrainSourceArgs) -> Result<(), Error> {
    let cfg = AdaptConfig {
        stage: Stage::Source,
        source_epochs: args.epochs,
        source_lr: args.lr,
        batch_size: args.batch,
        seed: args.seed,
        record_wall_time: args.record_time,
        ..AdaptConfig::default()
    };
    cfg.validate()?;
    let data = load_dataset(&args.data, Split::Train)?;
    let val = load_dataset(&args.data, Split::Val)?;
    let mut run = RunManifest::new("train-source", &args, Some(args.seed));
    run.config = serde_json::to_value(&cfg)?;
    run.input_dataset("source_train", &data);
    run.input_dataset("source_val", &val);
    let init = match &args.init {
        Some(p) => {
            run.input_file("init_model", p)?;
            Model::load(p)?
        }
        None => Model {
            params: countshift_core::models::init_params(args.seed),
            hyperparameters: cfg.hyperparameters(Stage::Source),
            seed: args.seed,
        },
    };
    let (model, log) = train_source_from(init, &data, Some(&val), &cfg)?;
    make_dir(&args.out)?;
    write_model_outputs(&mut run, &args.out, &model, &log)?;
    run.write(&args.out)
}

fn cmd_adapt(args: AdaptArgs) -> Result<(), Error> {
    let cfg = AdaptConfig {
        stage: args.stage,
        alpha: args.alpha,
        lambda1: args.lambda1,
        lambda2: args.lambda2,
        margin: args.margin,
        pair_threshold: args.pair_threshold,
        sub_fraction: args.sub_fraction,
        adapt_epochs: args.epochs,
        adapt_lr: args.lr,
        disc_lr: args.disc_lr.unwrap_or(args.lr),
        batch_size: args.batch,
        seed: args.seed,
        record_wall_time: args.record_time,
        ..AdaptConfig::default()
    };
    cfg.validate()?;
    let model = Model::load(&args.model)?;
    let source = load_dataset(&args.source, Split::Train)?;
    let target = load_dataset_unlabeled(&args.target, Split::Train)?;
    let target_val = load_dataset_unlabeled(&args.target, Split::Val)?;
    let mut run = RunManifest::new("adapt", &args, Some(args.seed));
    run.config = serde_json::to_value(&cfg)?;
    run.input_file("model", &args.model)?;
    run.input_dataset("source_train", &source);
    run.input_dataset("target_train", &target);
    run.input_dataset("target_val", &target_val);
    let (model, log) = adapt(model, &source, &target, Some(&target_val), &cfg)?;
    make_dir(&args.out)?;
    write_model_outputs(&mut run, &args.out, &model, &log)?;
    run.write(&args.out)
}

fn cmd_eval(args: EvalArgs) -> Result<(), Error> {
    let model = Model::load(&args.model)?;
    let data = load_dataset(&args.data, args.split)?;
    let mut run = RunManifest::new("eval", &args, None);
    run.input_file("model", &args.model)?;
    run.input_dataset("data", &data);
    let report = evaluate_mre(&model.params, &data)?;
    make_dir(&args.out)?;
    let csv = args.out.join("eval.csv");
    write_text(&csv, &report.to_csv())?;
    run.output("eval_csv", &csv)?;
    let summary = args.out.join("eval_summary.json");
    write_text(&summary, &(report.summary_json()? + "\n"))?;
    run.output("eval_summary", &summary)?;
    if args.dump_maps {
        let maps = predict_density(&model.params, &data.items)?;
        let named: Vec<_> = data.items.iter().map(|it| it.id.clone()).zip(maps).collect();
        dump_heatmaps(&named, &args.out.join("maps"))?;
    }
    match report.mre {
        Some(m) => println!("MRE {m:.2}% over {} images", report.rows.len() - report.skipped_zero_gt),
        None => println!("MRE undefined: no image with a nonzero count"),
    }
    run.write(&args.out)
}

fn cmd_sweep(args: SweepArgs) -> Result<(), Error> {
    let grid = match &args.grid {
        Some(p) => {
            let bytes = std::fs::read(p).map_err(|e| io_err(p, e))?;
            serde_json::from_slice::<SweepGrid>(&bytes)
                .map_err(|e| Error::InvalidArgument(format!("grid file {}: {e}", p.display())))?
        }
        None => SweepGrid::default(),
    };
    let cfg = AdaptConfig {
        margin: args.margin,
        pair_threshold: args.pair_threshold,
        sub_fraction: args.sub_fraction,
        adapt_epochs: args.epochs,
        adapt_lr: args.lr,
        disc_lr: args.disc_lr.unwrap_or(args.lr),
        batch_size: args.batch,
        seed: args.seed,
        ..AdaptConfig::default()
    };
    let opts = SweepOptions {
        subset_fraction: args.subset_frac,
        subset_seed: args.seed,
        budget_seconds: args.budget_seconds,
        report_mre: true,
    };
    let model = Model::load(&args.model)?;
    let source = load_dataset(&args.source, Split::Train)?;
    let target = load_dataset_unlabeled(&args.target, Split::Train)?;
    let test = labelled_split(&args.target, Split::Test);
    let mut run = RunManifest::new("sweep", &args, Some(args.seed));
    run.config = json!({"adapt": cfg, "grid": grid, "options": opts});
    run.input_file("model", &args.model)?;
    run.input_dataset("source_train", &source);
    run.input_dataset("target_train", &target);
    if let Some(t) = &test {
        run.input_dataset("target_test", t);
    }
    let report = run_sweep(&model, &source, &target, &target, test.as_ref(), &grid, &cfg, &opts)?;
    make_dir(&args.out)?;
    let csv = args.out.join("sweep.csv");
    write_text(&csv, &report.to_csv())?;
    run.output("sweep_csv", &csv)?;
    let js = args.out.join("sweep.json");
    write_text(&js, &(serde_json::to_string_pretty(&report)? + "\n"))?;
    run.output("sweep_json", &js)?;
    if !report.complete {
        eprintln!("budget exhausted: sweep report is incomplete");
    }
    run.write(&args.out)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_) => EXIT_USAGE,
        Error::MalformedDataset { .. } => EXIT_DATASET,
        Error::TrainingDiverged(_) => EXIT_DIVERGED,
        _ => EXIT_OTHER,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = std::env::var("COUNTSHIFT_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        // fails only if a pool already exists, which cannot happen this early
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::TrainSource(a) => cmd_train_source(a),
        Command::Adapt(a) => cmd_adapt(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
