mod plot;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use cleanpose::causal::QueueStrategy;
use cleanpose::data::{self, circular_variance, BiasConfig, Dataset, Split};
use cleanpose::geometry::yaw_of;
use cleanpose::metrics::{evaluate, EvalReport, METRIC_NAMES};
use cleanpose::posenet::{forward_gradient_check, ModelConfig};
use cleanpose::train::{run_trainer, RunRecord, TrainConfig, Trainer, CHECKPOINT_VERSION, EVAL_FILE, RECORD_FILE, TOOL_VERSION};
use cleanpose::Error;
use serde_json::Value;

#[derive(Parser)]
#[command(name = "cleanpose", version, about = "Causal category-level pose estimation on a synthetic yaw-bias benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a biased train split and a uniform-yaw test split
    GenData(GenDataArgs),
    /// Train a model and write a run record
    Train(TrainArgs),
    /// Print the evaluation table of a record, checkpoint or oracle
    Eval(EvalArgs),
    /// Run every row of an ablation matrix for each seed
    Ablate(AblateArgs),
    /// Write SVG charts for one or more run records
    Plot(PlotArgs),
    /// Central-difference gradient check of a full forward pass
    GradCheck(GradCheckArgs),
    /// Print tool and file-format versions
    Version,
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Von Mises concentration of training yaw (0 = uniform)
    #[arg(long, default_value_t = 0.0)]
    kappa: f64,
    #[arg(long, default_value_t = 8)]
    train_instances: usize,
    #[arg(long, default_value_t = 4)]
    test_instances: usize,
    /// Gaussian coordinate noise in meters
    #[arg(long, default_value_t = 0.002)]
    noise: f64,
    /// Training samples
    #[arg(long, default_value_t = 3000)]
    samples: usize,
    #[arg(long, default_value_t = 600)]
    test_samples: usize,
    #[arg(long, default_value_t = 128)]
    points: usize,
    /// Overwrite a non-empty output directory
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Tiny,
    Paper,
}

impl Preset {
    fn model(self) -> ModelConfig {
        match self {
            Preset::Desk => ModelConfig::desk(),
            Preset::Tiny => ModelConfig::tiny(),
            Preset::Paper => ModelConfig::paper(),
        }
    }

    fn config(self) -> TrainConfig {
        match self {
            Preset::Paper => TrainConfig::paper(),
            _ => TrainConfig::for_model(self.model()),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    QueueFifo,
    QueueSimilarity,
    QueueNone,
    MembankSimilarity,
    MembankNone,
}

impl From<StrategyArg> for QueueStrategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::QueueFifo => QueueStrategy::QueueFifo,
            StrategyArg::QueueSimilarity => QueueStrategy::QueueSimilarity,
            StrategyArg::QueueNone => QueueStrategy::QueueNone,
            StrategyArg::MembankSimilarity => QueueStrategy::MembankSimilarity,
            StrategyArg::MembankNone => QueueStrategy::MembankNone,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory written by gen-data
    #[arg(long)]
    data: PathBuf,
    /// Record directory
    #[arg(long)]
    out: PathBuf,
    /// JSON config; keys missing from the file keep their defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model size and training defaults, applied before the config file
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    #[command(flatten)]
    overrides: Overrides,
    /// Resume from a checkpoint; the run keeps the checkpoint's config
    #[arg(long)]
    resume: Option<PathBuf>,
}

/// Flags that override config-file values.
#[derive(Args, Clone, Default)]
struct Overrides {
    /// Front-door causal block [default: from config, true]
    #[arg(long)]
    causal: Option<bool>,
    /// Knowledge distillation [default: from config, true]
    #[arg(long)]
    kd: Option<bool>,
    /// Adaptive fusion gate [default: from config, true]
    #[arg(long)]
    fusion: Option<bool>,
    /// Confounder store update policy [default: from config, queue-fifo]
    #[arg(long, value_enum)]
    queue_strategy: Option<StrategyArg>,
    /// Queue length per category [default: from config, 80]
    #[arg(long)]
    nq: Option<usize>,
    /// Confounder features sampled per step [default: from config, 12]
    #[arg(long)]
    ns: Option<usize>,
    /// Run seed [default: from config, 1]
    #[arg(long)]
    seed: Option<u64>,
    /// Total training iterations [default: from config, 5000]
    #[arg(long)]
    iterations: Option<usize>,
}

impl Overrides {
    fn is_empty(&self) -> bool {
        self.causal.is_none()
            && self.kd.is_none()
            && self.fusion.is_none()
            && self.queue_strategy.is_none()
            && self.nq.is_none()
            && self.ns.is_none()
            && self.seed.is_none()
    }

    fn apply(&self, c: &mut TrainConfig) {
        if let Some(v) = self.causal {
            c.model.causal_enabled = v;
        }
        if let Some(v) = self.kd {
            c.model.kd_enabled = v;
        }
        if let Some(v) = self.fusion {
            c.model.fusion_enabled = v;
        }
        if let Some(v) = self.queue_strategy {
            c.queue.strategy = v.into();
        }
        if let Some(v) = self.nq {
            c.queue.length = v;
        }
        if let Some(v) = self.ns {
            c.queue.samples = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.iterations {
            c.total_iterations = v;
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    /// Record directory written by train
    #[arg(long, conflicts_with_all = ["checkpoint", "oracle"])]
    record: Option<PathBuf>,
    /// Checkpoint to evaluate on --data
    #[arg(long, requires = "data")]
    checkpoint: Option<PathBuf>,
    /// Score the ground truth itself on --data
    #[arg(long, requires = "data", conflicts_with = "checkpoint")]
    oracle: bool,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Also write the report as JSON
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    /// JSON matrix: {"base": {..}, "rows": [{"name": .., "causal": .., "kd": .., "config": {..}}]}
    #[arg(long)]
    matrix: PathBuf,
    /// Dataset directory
    #[arg(long)]
    data: PathBuf,
    /// Sweep directory; finished records are reused
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated seeds
    #[arg(long, value_delimiter = ',', default_value = "1,42,500")]
    seeds: Vec<u64>,
    /// Model size and training defaults under the matrix base
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
}

#[derive(Args)]
struct PlotArgs {
    /// Record directories
    #[arg(long, num_args = 1..)]
    records: Vec<PathBuf>,
    /// Output directory for SVG files
    #[arg(long)]
    out: PathBuf,
    /// Yaw histogram bins
    #[arg(long, default_value_t = 36)]
    bins: usize,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, value_enum, default_value = "tiny")]
    preset: Preset,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Parameter coordinates probed
    #[arg(long, default_value_t = 600)]
    max_coords: usize,
}

/// Error carrying the process exit code.
struct Failure {
    code: u8,
    message: String,
}

const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

fn usage(message: impl Into<String>) -> Failure {
    Failure { code: EXIT_USAGE, message: message.into() }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure { code: EXIT_IO, message: format!("{}: {e}", path.display()) }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io { .. }
            | Error::CorruptManifest { .. }
            | Error::VersionMismatch { .. }
            | Error::TruncatedArray { .. }
            | Error::CorruptCheckpoint(_) => EXIT_IO,
            Error::NonFiniteLoss { .. } | Error::NonFiniteGradient(_) | Error::DegenerateInput(_) => EXIT_NUMERIC,
            _ => EXIT_USAGE,
        };
        Failure { code, message: e.to_string() }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Some(n) = std::env::var("CLEANPOSE_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            log::warn!("could not cap worker threads: {e}");
        }
    }
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Plot(a) => plot_records(a),
        Command::GradCheck(a) => grad_check(a),
        Command::Version => {
            println!("cleanpose {TOOL_VERSION}");
            println!("dataset format {}", data::FORMAT_VERSION);
            println!("checkpoint format {CHECKPOINT_VERSION}");
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn is_nonempty_dir(path: &Path) -> bool {
    fs::read_dir(path).map(|mut d| d.next().is_some()).unwrap_or(false)
}

fn gen_data(a: GenDataArgs) -> CliResult {
    if is_nonempty_dir(&a.out) && !a.force {
        return Err(usage(format!("{} is not empty; pass --force to overwrite", a.out.display())));
    }
    let bias = BiasConfig {
        yaw_concentration: a.kappa,
        train_instances_per_category: a.train_instances,
        test_instances_per_category: a.test_instances,
        noise_sigma: a.noise,
        train_samples: a.samples,
        test_samples: a.test_samples,
        n_points: a.points,
    };
    bias.validate().map_err(|e| usage(e.to_string()))?;
    let ds = Dataset::generate(bias, a.seed)?;
    ds.save(&a.out)?;
    println!("wrote {}", a.out.display());
    for (split, samples) in [(Split::Train, &ds.train), (Split::Test, &ds.test)] {
        let yaws: Vec<f64> = samples.iter().map(|s| yaw_of(&s.gt.r)).collect();
        println!("{split:?}: {} samples, yaw circular variance {:.4}", samples.len(), circular_variance(&yaws));
    }
    Ok(())
}

fn read_json(path: &Path) -> CliResult<Value> {
    let text = fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

/// Recursively overlays `patch` onto `base`.
fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p.clone(),
    }
}

fn config_from(base: TrainConfig, patches: &[&Value]) -> CliResult<TrainConfig> {
    let mut json = serde_json::to_value(&base).expect("config serializes");
    for p in patches {
        merge(&mut json, p);
    }
    let mut config: TrainConfig = serde_json::from_value(json).map_err(|e| usage(format!("invalid config: {e}")))?;
    let given = |teacher: &str| patches.iter().any(|p| p.get(teacher).and_then(|t| t.get("dim")).is_some());
    if !given("queue_teacher") {
        config.queue_teacher.dim = config.model.channels();
    }
    if !given("kd_teacher") {
        config.kd_teacher.dim = config.model.c3;
    }
    Ok(config)
}

fn load_dataset(dir: &Path) -> CliResult<Dataset> {
    Ok(Dataset::load(dir)?)
}

fn print_report(report: &EvalReport) {
    print!("{}", report.to_table());
    println!("mean 5deg accuracy: {:.4}", report.mean_5deg());
}

fn train(a: TrainArgs) -> CliResult {
    let ds = load_dataset(&a.data)?;
    let trainer = match &a.resume {
        Some(ckpt) => {
            if !a.overrides.is_empty() || a.config.is_some() {
                return Err(usage("--resume keeps the checkpoint's config; only --iterations may change"));
            }
            let mut t = Trainer::load_checkpoint(ckpt, &ds.train)?;
            if let Some(n) = a.overrides.iterations {
                t.extend_to(n)?;
            }
            t
        }
        None => {
            let base = a.preset.config();
            let file = a.config.as_deref().map(read_json).transpose()?;
            let mut cfg = config_from(base, file.as_slice().iter().collect::<Vec<_>>().as_slice())?;
            a.overrides.apply(&mut cfg);
            cfg.validate().map_err(|e| usage(e.to_string()))?;
            Trainer::new(cfg, &ds.train)?
        }
    };
    let record = run_trainer(trainer, &ds, Some(&a.out))?;
    print_report(record.eval());
    println!("yaw divergence {:.5}  checksum {}", record.yaw_divergence, record.param_checksum);
    println!("record written to {}", a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> CliResult {
    let report = if let Some(dir) = &a.record {
        if !dir.join(RECORD_FILE).exists() {
            return Err(Failure { code: EXIT_IO, message: format!("{} holds no run record", dir.display()) });
        }
        RunRecord::load(dir)?.eval().clone()
    } else if let Some(ckpt) = &a.checkpoint {
        if !ckpt.exists() {
            return Err(Failure { code: EXIT_IO, message: format!("checkpoint {} not found", ckpt.display()) });
        }
        let ds = load_dataset(a.data.as_deref().expect("clap enforces --data"))?;
        let trainer = Trainer::load_checkpoint(ckpt, &ds.train)?;
        trainer.evaluate(&ds.test)?.0
    } else if a.oracle {
        let ds = load_dataset(a.data.as_deref().expect("clap enforces --data"))?;
        let preds: Vec<_> = ds.test.iter().map(|s| (s.category, s.gt)).collect();
        let gts: Vec<_> = ds.test.iter().map(|s| s.gt).collect();
        evaluate(&preds, &gts, &data::category_specs(), &Default::default())?
    } else {
        return Err(usage("pass one of --record, --checkpoint or --oracle"));
    };
    print_report(&report);
    if let Some(out) = &a.out {
        let text = serde_json::to_string_pretty(&report.to_json()).expect("report serializes");
        fs::write(out, text + "\n").map_err(|e| io_failure(out, e))?;
    }
    Ok(())
}

struct MatrixRow {
    name: String,
    patch: Value,
}

fn parse_matrix(path: &Path) -> CliResult<(Value, Vec<MatrixRow>)> {
    let v = read_json(path)?;
    let bad = |m: &str| usage(format!("{}: {m}", path.display()));
    let base = v.get("base").cloned().unwrap_or(Value::Object(Default::default()));
    if !base.is_object() {
        return Err(bad("\"base\" must be an object"));
    }
    let rows = v.get("rows").and_then(Value::as_array).ok_or_else(|| bad("missing \"rows\" array"))?;
    if rows.is_empty() {
        return Err(bad("\"rows\" is empty"));
    }
    let mut out = Vec::new();
    for row in rows {
        let obj = row.as_object().ok_or_else(|| bad("rows must be objects"))?;
        let name = obj.get("name").and_then(Value::as_str).ok_or_else(|| bad("every row needs a \"name\""))?;
        if name.is_empty() || name.contains(['/', '\\']) || out.iter().any(|r: &MatrixRow| r.name == name) {
            return Err(bad(&format!("invalid or duplicate row name {name:?}")));
        }
        let mut patch = obj.get("config").cloned().unwrap_or(Value::Object(Default::default()));
        for (key, field) in [("causal", "causal_enabled"), ("kd", "kd_enabled"), ("fusion", "fusion_enabled")] {
            if let Some(flag) = obj.get(key) {
                let flag = flag.as_bool().ok_or_else(|| bad(&format!("\"{key}\" must be a boolean")))?;
                merge(&mut patch, &serde_json::json!({ "model": { field: flag } }));
            }
        }
        if let Some(s) = obj.get("queue_strategy") {
            merge(&mut patch, &serde_json::json!({ "queue": { "strategy": s } }));
        }
        for key in obj.keys() {
            if !["name", "config", "causal", "kd", "fusion", "queue_strategy"].contains(&key.as_str()) {
                return Err(bad(&format!("unknown row key {key:?}")));
            }
        }
        out.push(MatrixRow { name: name.to_string(), patch });
    }
    Ok((base, out))
}

fn ablate(a: AblateArgs) -> CliResult {
    let (base, rows) = parse_matrix(&a.matrix)?;
    if a.seeds.is_empty() {
        return Err(usage("no seeds given"));
    }
    let mut configs = Vec::new();
    for row in &rows {
        for &seed in &a.seeds {
            let mut cfg = config_from(a.preset.config(), &[&base, &row.patch])?;
            cfg.seed = seed;
            cfg.validate().map_err(|e| usage(format!("row {}: {e}", row.name)))?;
            configs.push((row.name.clone(), seed, cfg));
        }
    }
    let ds = load_dataset(&a.data)?;
    let mut lines = vec![format!(
        "row,seed,causal,kd,fusion,queue_strategy,{},mean_5deg,yaw_divergence,config_hash",
        METRIC_NAMES.join(",")
    )];
    let mut per_row: Vec<(String, Vec<f64>)> = Vec::new();
    for (name, seed, cfg) in configs {
        let dir = a.out.join(&name).join(format!("seed{seed}"));
        let record = match RunRecord::load(&dir) {
            Ok(r) if r.config == cfg && dir.join(EVAL_FILE).exists() => {
                log::info!("reusing {}", dir.display());
                r
            }
            _ => {
                log::info!("running {name} seed {seed}");
                run_trainer(Trainer::new(cfg.clone(), &ds.train)?, &ds, Some(&dir))?
            }
        };
        let ev = record.eval();
        let m = &cfg.model;
        let strategy = serde_json::to_value(cfg.queue.strategy).expect("enum serializes");
        let metrics: Vec<String> = ev.mean.iter().map(|v| format!("{v}")).collect();
        lines.push(format!(
            "{name},{seed},{},{},{},{},{},{},{},{}",
            m.causal_enabled,
            m.kd_enabled,
            m.fusion_enabled,
            strategy.as_str().unwrap_or_default(),
            metrics.join(","),
            ev.mean_5deg(),
            record.yaw_divergence,
            record.config_hash
        ));
        match per_row.iter_mut().find(|(n, _)| *n == name) {
            Some((_, v)) => v.push(ev.mean_5deg()),
            None => per_row.push((name, vec![ev.mean_5deg()])),
        }
    }
    fs::create_dir_all(&a.out).map_err(|e| io_failure(&a.out, e))?;
    let csv = a.out.join("ablation.csv");
    fs::write(&csv, lines.join("\n") + "\n").map_err(|e| io_failure(&csv, e))?;
    let mut summary = vec!["row,seeds,mean_5deg_mean,mean_5deg_variance".to_string()];
    for (name, v) in &per_row {
        let (mean, var) = mean_var(v);
        summary.push(format!("{name},{},{mean},{var}", v.len()));
        println!("{name:<24} mean 5deg {mean:.4} (variance {var:.6}, {} seeds)", v.len());
    }
    let path = a.out.join("ablation_summary.csv");
    fs::write(&path, summary.join("\n") + "\n").map_err(|e| io_failure(&path, e))?;
    println!("wrote {}", csv.display());
    Ok(())
}

/// Mean and unbiased sample variance.
fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var)
}

fn plot_records(a: PlotArgs) -> CliResult {
    if a.records.is_empty() {
        return Err(usage("no records given"));
    }
    if a.bins == 0 {
        return Err(usage("--bins must be positive"));
    }
    let mut loaded = Vec::new();
    for dir in &a.records {
        let parts: Vec<String> = dir.components().rev().take(2).map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
        let name = parts.into_iter().rev().collect::<Vec<_>>().join("-");
        loaded.push((name, RunRecord::load(dir)?));
    }
    fs::create_dir_all(&a.out).map_err(|e| io_failure(&a.out, e))?;
    let write = |file: &str, svg: String| {
        let p = a.out.join(file);
        fs::write(&p, svg).map_err(|e| io_failure(&p, e))
    };
    for (i, (name, rec)) in loaded.iter().enumerate() {
        let samples = rec.yaw_samples.as_ref().ok_or_else(|| usage(format!("record {name} has no yaw samples")))?;
        write(&format!("yaw_{i:02}_{name}.svg"), plot::yaw_histograms(name, samples, a.bins))?;
    }
    write("metrics.svg", plot::metric_bars(&loaded))?;
    write("lr_schedule.svg", plot::lr_curve(&loaded[0].1.config))?;
    println!("wrote {} charts to {}", loaded.len() + 2, a.out.display());
    Ok(())
}

fn grad_check(a: GradCheckArgs) -> CliResult {
    let report = forward_gradient_check(a.preset.model(), a.seed, a.max_coords)?;
    println!(
        "checked {} coordinates: max relative error {:.3e} (tolerance {:.0e})",
        report.coordinates_checked, report.max_rel_error, report.tol
    );
    if report.passed {
        println!("PASS");
        Ok(())
    } else {
        Err(Failure { code: EXIT_NUMERIC, message: format!("gradient check failed at {:?}", report.worst) })
    }
}
