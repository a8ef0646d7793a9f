use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use mtpgo::data::{
    generate_synthetic, ingest_csv, sidecar_path, split, CenterPolicy, SplitSpec, SyntheticKind, TrajectoryTable,
};
use mtpgo::gradcheck::{gradcheck, gradcheck_scene, GradcheckOptions};
use mtpgo::metrics::{MetricsReport, Scope};
use mtpgo::scenegraph::SceneSequence;
use mtpgo::trainer::{evaluate, prepare_scenes, train, Baseline, Checkpoint, Forecaster, TrainConfig, TrainStatus};
use mtpgo::{Error, Result};

const FORECAST_FORMAT: &str = "mtpgo-forecast";
const FORECAST_VERSION: u32 = 1;

/// Multi-agent trajectory prediction with graph recurrent networks and
/// learned motion models.
///
/// Every subcommand is deterministic given its configuration and seed.
/// Exit codes: 0 success, 1 validation error, 2 numeric failure.
#[derive(Parser, Debug)]
#[command(name = "mtpgo", version)]
struct Cli {
    /// More output on stderr (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    /// Only print errors.
    #[arg(short, long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic scenes as a trajectory CSV plus geometry sidecar.
    Generate(GenerateArgs),
    /// Train a model and write a checkpoint and a JSON-lines training log.
    Train(TrainArgs),
    /// Report metrics of a checkpoint or an analytic baseline.
    Evaluate(EvaluateArgs),
    /// Write per-agent, per-step mixture forecasts as JSON lines.
    Predict(PredictArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// Scenario family: highway, roundabout or fork.
    #[arg(long)]
    kind: String,
    /// Number of independent scenes.
    #[arg(short = 'n', long)]
    scenes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV; the geometry sidecar is written next to it as .json.
    #[arg(short, long)]
    out: PathBuf,
}

/// Options shared by the subcommands that read trajectory data.
#[derive(Args, Debug, Default)]
struct DataArgs {
    /// TOML configuration; keys are the training configuration fields plus
    /// data, geometry, checkpoint, out_dir, verbosity, stride, center,
    /// split and scope. Flags override the file.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Trajectory CSV.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Geometry sidecar (default: the CSV path with a .json extension).
    #[arg(long)]
    geometry: Option<PathBuf>,
    /// Window stride in samples [default: 10].
    #[arg(long)]
    stride: Option<usize>,
    /// Centre agent policy: first or random [default: random].
    #[arg(long)]
    center: Option<String>,
}

/// Flag overrides for every training configuration key.
#[derive(Args, Debug, Default)]
struct Overrides {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    hidden: Option<usize>,
    /// graphconv, gcn, gat or gatplus.
    #[arg(long)]
    gnn: Option<String>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    gnn_depth: Option<usize>,
    /// Motion model order, 1 or 2.
    #[arg(long)]
    order: Option<u8>,
    /// Mixture components M.
    #[arg(long)]
    components: Option<usize>,
    #[arg(long)]
    slope: Option<f64>,
    #[arg(long)]
    sample_time: Option<f64>,
    #[arg(long)]
    t_h: Option<f64>,
    #[arg(long)]
    t_f: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    use_encoder_gnn: Option<bool>,
    #[arg(long)]
    use_decoder_gnn: Option<bool>,
    #[arg(long)]
    use_ekf: Option<bool>,
    #[arg(long)]
    use_ode: Option<bool>,
    #[arg(long)]
    use_static: Option<bool>,
    #[arg(long)]
    huber_delta: Option<f64>,
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long)]
    chunk_size: Option<usize>,
}

impl Overrides {
    fn entries(&self) -> Vec<(&'static str, toml::Value)> {
        let mut out = Vec::new();
        macro_rules! put {
            ($($field:ident),* ; $($int:ident),*) => {
                $(if let Some(v) = &self.$field { out.push((stringify!($field), toml::Value::try_from(v.clone()).expect("plain value"))); })*
                $(if let Some(v) = self.$int { out.push((stringify!($int), toml::Value::Integer(v as i64))); })*
            };
        }
        put!(learning_rate, gnn, slope, sample_time, t_h, t_f, use_encoder_gnn, use_decoder_gnn, use_ekf,
             use_ode, use_static, huber_delta, clip_norm;
             epochs, batch_size, hidden, heads, gnn_depth, order, components, seed, chunk_size);
        out
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Directory for checkpoint.bin, train_log.jsonl and config.toml.
    #[arg(short, long)]
    out_dir: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Trained checkpoint; mutually exclusive with --baseline.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Analytic baseline: cv or ca.
    #[arg(long)]
    baseline: Option<String>,
    /// Agents entering the metrics: all or center [default: all].
    #[arg(long)]
    scope: Option<String>,
    /// Partition to evaluate: train, val, test or all.
    #[arg(long, default_value = "test")]
    partition: String,
    /// Write report.json and scenes.csv here.
    #[arg(short, long)]
    out_dir: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Forecast JSON-lines output.
    #[arg(short, long)]
    out: PathBuf,
    /// Partition to predict: train, val, test or all.
    #[arg(long, default_value = "all")]
    partition: String,
    /// Only the first N scenes.
    #[arg(long)]
    max_scenes: Option<usize>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// TOML configuration with training keys; defaults to the small check
    /// model (hidden 8, 2 components, 5 history and 4 horizon steps).
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    /// Maximum relative error.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Perturb one analytic gradient entry; the check must then fail.
    #[arg(long, hide = true)]
    corrupt_gradient: bool,
    #[command(flatten)]
    overrides: Overrides,
}

/// Non-training keys of the configuration file.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileOptions {
    data: Option<PathBuf>,
    geometry: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    out_dir: Option<PathBuf>,
    verbosity: Option<u8>,
    stride: Option<usize>,
    center: Option<String>,
    /// Train, validation and test fractions.
    split: Option<[f64; 3]>,
    scope: Option<String>,
    baseline: Option<String>,
}

struct Settings {
    train: TrainConfig,
    file: FileOptions,
}

fn load_settings(path: Option<&Path>, base: TrainConfig, overrides: &Overrides) -> Result<Settings> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
            text.parse::<toml::Table>()
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    let train_keys = match toml::Value::try_from(&base) {
        Ok(toml::Value::Table(t)) => t,
        _ => return Err(Error::Config("cannot serialise the default configuration".into())),
    };
    let mut train_table = train_keys.clone();
    let mut file_table = toml::Table::new();
    for (k, v) in std::mem::take(&mut table) {
        if train_keys.contains_key(&k) {
            train_table.insert(k, v);
        } else {
            file_table.insert(k, v);
        }
    }
    for (k, v) in overrides.entries() {
        train_table.insert(k.to_string(), v);
    }
    let train: TrainConfig = toml::Value::Table(train_table)
        .try_into()
        .map_err(|e| Error::Config(format!("configuration: {e}")))?;
    let file: FileOptions = toml::Value::Table(file_table)
        .try_into()
        .map_err(|e| Error::Config(format!("configuration: {e}")))?;
    Ok(Settings { train, file })
}

struct Log {
    level: i32,
}

impl Log {
    fn info(&self, msg: impl AsRef<str>) {
        if self.level >= 1 {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn debug(&self, msg: impl AsRef<str>) {
        if self.level >= 2 {
            eprintln!("{}", msg.as_ref());
        }
    }
}

fn center_policy(name: Option<&str>, seed: u64) -> Result<CenterPolicy> {
    match name.unwrap_or("random") {
        "first" => Ok(CenterPolicy::First),
        "random" => Ok(CenterPolicy::Random { seed }),
        other => Err(Error::Config(format!("unknown center policy {other:?} (first|random)"))),
    }
}

fn load_table(args: &DataArgs, file: &FileOptions) -> Result<TrajectoryTable> {
    let data = args
        .data
        .clone()
        .or_else(|| file.data.clone())
        .ok_or_else(|| Error::Config("no data file given (--data or `data` in the config)".into()))?;
    let geometry = args.geometry.clone().or_else(|| file.geometry.clone()).unwrap_or_else(|| sidecar_path(&data));
    ingest_csv(&data, &geometry)
}

/// Windows the data and returns the requested partition.
fn scenes_for(args: &DataArgs, s: &Settings, partition: &str) -> Result<(Vec<SceneSequence>, Vec<SceneSequence>, Vec<SceneSequence>)> {
    let table = load_table(args, &s.file)?;
    let stride = args.stride.or(s.file.stride).unwrap_or(10);
    if stride == 0 {
        return Err(Error::Config("stride must be positive".into()));
    }
    let center = center_policy(args.center.as_deref().or(s.file.center.as_deref()), s.train.seed)?;
    let scenes = prepare_scenes(&table, &s.train, stride, center)?;
    let spec = match s.file.split {
        Some([a, b, c]) => SplitSpec::new(a, b, c)?,
        None => SplitSpec::default(),
    };
    if partition == "all" {
        return Ok((scenes, Vec::new(), Vec::new()));
    }
    split(scenes, &spec, s.train.seed)
}

fn pick(parts: (Vec<SceneSequence>, Vec<SceneSequence>, Vec<SceneSequence>), partition: &str) -> Result<Vec<SceneSequence>> {
    match partition {
        "all" | "train" => Ok(parts.0),
        "val" => Ok(parts.1),
        "test" => Ok(parts.2),
        other => Err(Error::Config(format!("unknown partition {other:?} (train|val|test|all)"))),
    }
}

fn cmd_generate(a: &GenerateArgs, log: &Log) -> Result<()> {
    let kind = SyntheticKind::parse(&a.kind)
        .ok_or_else(|| Error::Config(format!("unknown scenario kind {:?} (highway|roundabout|fork)", a.kind)))?;
    let table = generate_synthetic(kind, a.scenes, a.seed)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    table.save(&a.out)?;
    log.info(format!("wrote {} rows to {}", table.rows.len(), a.out.display()));
    Ok(())
}

fn cmd_train(a: &TrainArgs, log: &Log) -> Result<TrainStatus> {
    let s = load_settings(a.data.config.as_deref(), TrainConfig::default(), &a.overrides)?;
    s.train.validate()?;
    let out_dir = a
        .out_dir
        .clone()
        .or_else(|| s.file.out_dir.clone())
        .ok_or_else(|| Error::Config("no output directory given (--out-dir or `out_dir`)".into()))?;
    let (train_set, val_set, _) = scenes_for(&a.data, &s, "split")?;
    log.info(format!("{} training and {} validation scenes", train_set.len(), val_set.len()));
    std::fs::create_dir_all(&out_dir)?;
    let mut log_file = BufWriter::new(std::fs::File::create(out_dir.join("train_log.jsonl"))?);
    let mut io_error = None;
    let outcome = train(&s.train, &train_set, &val_set, |r| {
        log.info(format!(
            "epoch {:>3} {:<16} loss {:.5} val_nll {}",
            r.epoch,
            r.recipe,
            r.train_loss,
            r.val_nll.map_or("n/a".into(), |v| format!("{v:.5}"))
        ));
        let line = serde_json::to_string(r).expect("epoch record serialises");
        if let Err(e) = writeln!(log_file, "{line}") {
            io_error.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_error {
        return Err(e.into());
    }
    log_file.flush()?;
    outcome.checkpoint.save(&out_dir.join("checkpoint.bin"))?;
    let cfg_text = toml::to_string(&s.train).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(out_dir.join("config.toml"), cfg_text)?;
    if let TrainStatus::Diverged { epoch, reason } = &outcome.status {
        eprintln!("training diverged in epoch {epoch}: {reason}; kept the last finite parameters");
    }
    log.info(format!("checkpoint written to {}", out_dir.join("checkpoint.bin").display()));
    Ok(outcome.status)
}

fn scope_of(name: Option<&str>) -> Result<Scope> {
    match name.unwrap_or("all") {
        "all" => Ok(Scope::All),
        "center" => Ok(Scope::Center),
        other => Err(Error::Config(format!("unknown scope {other:?} (all|center)"))),
    }
}

fn write_report(dir: &Path, report: &MetricsReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(dir.join("report.json"), json)?;
    std::fs::write(dir.join("scenes.csv"), report.table())?;
    Ok(())
}

fn cmd_evaluate(a: &EvaluateArgs, log: &Log) -> Result<()> {
    let mut s = load_settings(a.data.config.as_deref(), TrainConfig::default(), &a.overrides)?;
    let checkpoint = a.checkpoint.clone().or_else(|| s.file.checkpoint.clone());
    let baseline = a.baseline.clone().or_else(|| s.file.baseline.clone());
    let forecaster: Box<dyn Forecaster> = match (checkpoint, baseline) {
        (Some(_), Some(_)) => return Err(Error::Config("give either a checkpoint or a baseline, not both".into())),
        (Some(path), None) => {
            let ck = Checkpoint::load(&path)?;
            // windows must match the shapes the model was trained on
            s.train = ck.config.clone();
            Box::new(ck.model()?)
        }
        (None, Some(name)) => Box::new(
            Baseline::parse(&name).ok_or_else(|| Error::Config(format!("unknown baseline {name:?} (cv|ca)")))?,
        ),
        (None, None) => return Err(Error::Config("evaluate needs --checkpoint or --baseline".into())),
    };
    s.train.model_config()?;
    let scope = scope_of(a.scope.as_deref().or(s.file.scope.as_deref()))?;
    let scenes = pick(scenes_for(&a.data, &s, &a.partition)?, &a.partition)?;
    log.info(format!("evaluating {} on {} scenes", forecaster.name(), scenes.len()));
    let report = evaluate(forecaster.as_ref(), &scenes, scope)?;
    print!("{}", report.summary());
    if let Some(dir) = a.out_dir.clone().or_else(|| s.file.out_dir.clone()) {
        write_report(&dir, &report)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct ForecastHeader<'a> {
    format: &'a str,
    version: u32,
    components: usize,
    horizon: usize,
    sample_time: f64,
    coordinates: &'a str,
}

#[derive(Serialize)]
struct ForecastRecord {
    scene: usize,
    frame: i64,
    agent: u64,
    center: bool,
    step: usize,
    t: f64,
    pi: Vec<f64>,
    means: Vec<[f64; 2]>,
    covs: Vec<[f64; 4]>,
}

fn cmd_predict(a: &PredictArgs, log: &Log) -> Result<()> {
    let mut s = load_settings(a.data.config.as_deref(), TrainConfig::default(), &Overrides::default())?;
    let path = a
        .checkpoint
        .clone()
        .or_else(|| s.file.checkpoint.clone())
        .ok_or_else(|| Error::Config("predict needs --checkpoint".into()))?;
    let ck = Checkpoint::load(&path)?;
    s.train = ck.config.clone();
    let model = ck.model()?;
    let mut scenes = pick(scenes_for(&a.data, &s, &a.partition)?, &a.partition)?;
    if let Some(n) = a.max_scenes {
        scenes.truncate(n);
    }
    let refs: Vec<&SceneSequence> = scenes.iter().collect();
    let forecasts = model.forecast(&refs)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(std::fs::File::create(&a.out)?);
    let mc = ck.config.model_config()?;
    let header = ForecastHeader {
        format: FORECAST_FORMAT,
        version: FORECAST_VERSION,
        components: mc.components,
        horizon: mc.horizon,
        sample_time: mc.sample_time,
        coordinates: "world",
    };
    writeln!(w, "{}", json_line(&header))?;
    let mut records = 0usize;
    for (i, (scene, fc)) in scenes.iter().zip(&forecasts).enumerate() {
        let [ox, oy] = scene.origin;
        for (agent, f) in scene.agents.iter().zip(fc) {
            for k in 0..f.horizon() {
                let rec = ForecastRecord {
                    scene: i,
                    frame: scene.frame,
                    agent: agent.id.0,
                    center: agent.id == scene.center,
                    step: k + 1,
                    t: (k + 1) as f64 * mc.sample_time,
                    pi: f.pi.clone(),
                    means: f.means.iter().map(|m| [m[k][0] + ox, m[k][1] + oy]).collect(),
                    covs: f.covs.iter().map(|c| c[k]).collect(),
                };
                writeln!(w, "{}", json_line(&rec))?;
                records += 1;
            }
        }
    }
    w.flush()?;
    log.info(format!("wrote {records} records for {} scenes to {}", scenes.len(), a.out.display()));
    Ok(())
}

fn json_line<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("record serialises")
}

fn gradcheck_base() -> TrainConfig {
    TrainConfig { hidden: 8, components: 2, t_h: 1.0, t_f: 0.8, ..TrainConfig::default() }
}

fn cmd_gradcheck(a: &GradcheckArgs, log: &Log) -> Result<bool> {
    let s = load_settings(a.config.as_deref(), gradcheck_base(), &a.overrides)?;
    let mc = s.train.model_config()?;
    let scene = gradcheck_scene(mc.history, mc.horizon, s.train.seed)?;
    let opts = GradcheckOptions {
        step: a.step,
        tolerance: a.tolerance,
        seed: s.train.seed,
        corrupt: a.corrupt_gradient,
        ..GradcheckOptions::default()
    };
    let report = gradcheck(&mc, &scene, &opts)?;
    for c in &report.checks {
        println!(
            "{:<16} {}  max rel error {:.3e} (unfloored {:.3e}) at {}",
            c.recipe,
            if c.passed { "pass" } else { "FAIL" },
            c.max_relative_error,
            c.max_unfloored_error,
            c.worst_parameter
        );
    }
    log.info(format!("{} parameters, {} agents, {:.1?}", report.parameters, report.agents, report.elapsed));
    log.debug(format!("{report:?}"));
    Ok(report.passed())
}

fn run(cli: &Cli, log: &Log) -> Result<ExitCode> {
    match &cli.command {
        Command::Generate(a) => cmd_generate(a, log).map(|_| ExitCode::SUCCESS),
        Command::Train(a) => match cmd_train(a, log)? {
            TrainStatus::Completed => Ok(ExitCode::SUCCESS),
            TrainStatus::Diverged { .. } => Ok(ExitCode::from(2)),
        },
        Command::Evaluate(a) => cmd_evaluate(a, log).map(|_| ExitCode::SUCCESS),
        Command::Predict(a) => cmd_predict(a, log).map(|_| ExitCode::SUCCESS),
        Command::Gradcheck(a) => Ok(if cmd_gradcheck(a, log)? { ExitCode::SUCCESS } else { ExitCode::from(2) }),
    }
}

fn file_verbosity(cli: &Cli) -> Option<u8> {
    let path = match &cli.command {
        Command::Train(a) => a.data.config.as_deref(),
        Command::Evaluate(a) => a.data.config.as_deref(),
        Command::Predict(a) => a.data.config.as_deref(),
        Command::Gradcheck(a) => a.config.as_deref(),
        Command::Generate(_) => None,
    }?;
    let table: toml::Table = std::fs::read_to_string(path).ok()?.parse().ok()?;
    table.get("verbosity")?.as_integer().map(|v| v.clamp(0, 3) as u8)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = if cli.quiet {
        0
    } else if cli.verbose > 0 {
        1 + cli.verbose as i32
    } else {
        file_verbosity(&cli).map_or(1, i32::from)
    };
    let log = Log { level };
    match run(&cli, &log) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
