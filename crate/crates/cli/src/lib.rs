//! Subcommands of the `seqmri` binary. Every command writes into a run
//! directory, refuses to replace existing files, and leaves a
//! `<file>.meta.json` sidecar with the resolved config hash next to each
//! artifact.

use std::fs::{File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use seqmri::config::{write_sidecar, RunConfig};
use seqmri::forward::SamplingMode;
use seqmri::gradsuite::{self, SuiteRow};
use seqmri::metrics::{self, ImageMetrics, Summary};
use seqmri::params::{read_checkpoint, write_checkpoint};
use seqmri::phantom::{load_dataset, Dataset, Split};
use seqmri::pipeline::{self, EpisodeOptions, Method, Model, TrainConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("refusing to overwrite {}", .0.display())]
    Exists(PathBuf),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Core(#[from] seqmri::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{0} gradient checks failed")]
    GradCheck(usize),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Exists(_) => "exists",
            CliError::Io { .. } => "io",
            CliError::Core(seqmri::Error::Io(_)) => "io",
            CliError::Core(_) => "core",
            CliError::Json(_) => "json",
            CliError::GradCheck(_) => "gradcheck",
        }
    }

    /// Single-line JSON for stderr.
    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": self.kind(), "message": self.to_string() }).to_string()
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Parser)]
#[command(name = "seqmri", version, about = "Sequential k-space sampling on synthetic phantoms")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a phantom dataset.
    Datagen {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train a model and save a checkpoint plus its log.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Evaluate a checkpoint; writes per-image metrics.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Dump per-step masks and images for the first N evaluated images.
        #[arg(long, default_value_t = 0)]
        dump: usize,
    },
    /// Paired comparison of two metrics files (A against B).
    Compare {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check over every differentiable operator.
    Gradcheck {
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Steps {1, 2, 4} × co-design {on, off} grid.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        dataset: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed_override: Option<u64>,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<SamplingMode>,
    #[arg(long)]
    pub accel: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
}

fn parse_mode(s: &str) -> std::result::Result<SamplingMode, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| format!("unknown mode `{s}`"))
}

impl RunArgs {
    /// Config file (or defaults) with the command-line overrides applied.
    pub fn resolve(&self) -> Result<(RunConfig, PathBuf)> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(io_err(p))?;
                serde_json::from_str(&text)?
            }
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed_override {
            cfg.override_seed(s);
        }
        if let Some(m) = self.mode {
            cfg.train.mode = m;
        }
        if let Some(a) = self.accel {
            cfg.train.accel = a;
        }
        if let Some(s) = self.steps {
            cfg.train.steps = s;
        }
        cfg.validate()?;
        let out = self
            .out
            .clone()
            .or_else(|| cfg.out.clone())
            .ok_or_else(|| CliError::Usage("no output directory: pass --out or set `out` in the config".into()))?;
        Ok((cfg, out))
    }
}

fn create_new(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    match OpenOptions::new().write(true).create_new(true).open(path) {
        Ok(f) => Ok(BufWriter::new(f)),
        Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Exists(path.to_path_buf())),
        Err(e) => Err(io_err(path)(e)),
    }
}

/// Writes `path` once, then its sidecar.
fn write_artifact(path: &Path, cfg: &RunConfig, body: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let sidecar = PathBuf::from(format!("{}.meta.json", path.display()));
    if sidecar.exists() {
        return Err(CliError::Exists(sidecar));
    }
    let mut w = create_new(path)?;
    body(&mut w)?;
    w.flush().map_err(io_err(path))?;
    write_sidecar(path, cfg)?;
    Ok(())
}

fn load_ds(path: &Path, cfg: &RunConfig) -> Result<Dataset> {
    let ds = load_dataset(path)?;
    if ds.extent() != cfg.train.extent {
        return Err(CliError::Usage(format!(
            "dataset extent {} does not match config extent {}",
            ds.extent(),
            cfg.train.extent
        )));
    }
    Ok(ds)
}

#[derive(Deserialize)]
struct SidecarIn {
    config: RunConfig,
}

/// Config recorded beside an artifact.
pub fn read_sidecar_config(artifact: &Path) -> Result<RunConfig> {
    let path = PathBuf::from(format!("{}.meta.json", artifact.display()));
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    let side: SidecarIn = serde_json::from_str(&text)?;
    side.config.validate()?;
    Ok(side.config)
}

pub fn datagen(run: &RunArgs) -> Result<serde_json::Value> {
    let (cfg, out) = run.resolve()?;
    let ds = Dataset::generate(&cfg.phantom, cfg.dataset_size, &cfg.split)?;
    let path = out.join("dataset.sqds");
    write_artifact(&path, &cfg, |w| Ok(ds.write(w)?))?;
    let (tr, va, te) = cfg.split.counts(cfg.dataset_size)?;
    Ok(serde_json::json!({
        "dataset": path, "images": ds.len(), "train": tr, "val": va, "test": te, "config_hash": cfg.hash()
    }))
}

fn save_model(out: &Path, cfg: &RunConfig, model: &Model, log: &pipeline::TrainLog) -> Result<PathBuf> {
    let ckpt = out.join("model.ckpt");
    write_artifact(&ckpt, cfg, |w| Ok(write_checkpoint::<f32, _>(w, &model.params, None)?))?;
    write_artifact(&out.join("train_log.jsonl"), cfg, |w| {
        w.write_all(log.to_json_lines().as_bytes()).map_err(io_err(&out.join("train_log.jsonl")))
    })?;
    Ok(ckpt)
}

pub fn train(run: &RunArgs, dataset: &Path) -> Result<serde_json::Value> {
    let (cfg, out) = run.resolve()?;
    let ds = load_ds(dataset, &cfg)?;
    let config_path = out.join("config.json");
    write_artifact(&config_path, &cfg, |w| {
        w.write_all(cfg.to_json_pretty().as_bytes()).map_err(io_err(&config_path))
    })?;
    let (model, log) = pipeline::train_model(&cfg.train, &ds)?;
    let ckpt = save_model(&out, &cfg, &model, &log)?;
    Ok(serde_json::json!({
        "checkpoint": ckpt,
        "best_epoch": log.best_epoch,
        "best_val_ssim": log.best_val_ssim,
        "config_hash": cfg.hash()
    }))
}

fn parse_split(s: &str) -> Result<Split> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| CliError::Usage(format!("unknown split `{s}` (train, val, test)")))
}

pub fn eval(checkpoint: &Path, dataset: &Path, out: &Path, split: &str, dump: usize) -> Result<serde_json::Value> {
    let cfg = read_sidecar_config(checkpoint)?;
    let split = parse_split(split)?;
    let (params, _) = read_checkpoint(&mut BufReader::new(File::open(checkpoint).map_err(io_err(checkpoint))?))?;
    let model = Model::from_params(&cfg.train, params)?;
    let ds = load_ds(dataset, &cfg)?;
    let indices = ds.indices(split);
    let ev = pipeline::evaluate_indices(&model, &ds, &indices, cfg.train.eval_seed)?;
    let csv = out.join("metrics.csv");
    write_artifact(&csv, &cfg, |w| Ok(metrics::write_metrics_csv(w, &ev.metrics)?))?;
    for &i in indices.iter().take(dump) {
        let dir = out.join(format!("trace_{i:05}"));
        if dir.exists() {
            return Err(CliError::Exists(dir));
        }
        let trace = trace_for(&model, ds.image(i), i, cfg.train.eval_seed)?;
        seqmri::export::dump_trace(&dir, &trace)?;
        write_sidecar(&dir, &cfg)?;
    }
    let ssim: Vec<f64> = ev.metrics.iter().map(|m| m.ssim).collect();
    let psnr: Vec<f64> = ev.metrics.iter().map(|m| m.psnr).filter(|v| v.is_finite()).collect();
    let summary = serde_json::json!({
        "method": model.method,
        "images": ev.metrics.len(),
        "ssim": Summary::of(&ssim),
        "psnr": Summary::of(&psnr),
        "config_hash": cfg.hash()
    });
    let sp = out.join("summary.json");
    write_artifact(&sp, &cfg, |w| {
        w.write_all((summary.to_string() + "\n").as_bytes()).map_err(io_err(&sp))
    })?;
    Ok(summary)
}

/// Same sampler noise as evaluation of image `index`.
fn trace_for(model: &Model, x: &seqmri::Tensor<f32>, index: usize, eval_seed: u64) -> Result<pipeline::EpisodeTrace<f32>> {
    let tape = seqmri::ad::Tape::new();
    let vars = model.register(&tape, &model.params, false)?;
    let mut rng = seqmri::seed::stream(eval_seed, &[index as u64]);
    let ep = pipeline::run_episode(&tape, model, &vars, x, &mut rng, EpisodeOptions::default())?;
    Ok(ep.trace)
}

fn read_metrics(path: &Path) -> Result<Vec<ImageMetrics>> {
    let f = File::open(path).map_err(io_err(path))?;
    Ok(metrics::read_metrics_csv(BufReader::new(f))?)
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Serialize)]
struct CompareMeta {
    artifact: String,
    inputs: Vec<(PathBuf, String)>,
}

pub fn compare(a: &Path, b: &Path, out: &Path) -> Result<serde_json::Value> {
    let (ma, mb) = (read_metrics(a)?, read_metrics(b)?);
    if ma.iter().map(|m| m.index).ne(mb.iter().map(|m| m.index)) {
        return Err(CliError::Usage("metrics files cover different images".into()));
    }
    let sa: Vec<f64> = ma.iter().map(|m| m.ssim).collect();
    let sb: Vec<f64> = mb.iter().map(|m| m.ssim).collect();
    let report = metrics::compare(&sa, &sb)?;
    let rel: Vec<f64> = sa.iter().zip(&sb).map(|(x, y)| (x - y) / y.abs().max(1e-12)).collect();
    let lim = rel.iter().fold(1e-6f64, |m, v| m.max(v.abs()));
    let bins = metrics::histogram(&rel, 20, -lim, lim)?;
    let inputs = vec![(a.to_path_buf(), sha256_file(a)?), (b.to_path_buf(), sha256_file(b)?)];
    let files: [(&str, Box<dyn FnOnce(&mut BufWriter<File>) -> Result<()>>); 3] = [
        ("comparison.json", Box::new(|w| Ok(serde_json::to_writer_pretty(w, &report)?))),
        ("comparison.csv", Box::new(|w| Ok(report.write_csv(w)?))),
        ("relative_ssim_histogram.csv", Box::new(|w| Ok(metrics::write_histogram_csv(w, &bins)?))),
    ];
    for (name, body) in files {
        let path = out.join(name);
        let meta_path = out.join(format!("{name}.meta.json"));
        if meta_path.exists() {
            return Err(CliError::Exists(meta_path));
        }
        let mut w = create_new(&path)?;
        body(&mut w)?;
        w.flush().map_err(io_err(&path))?;
        let meta = CompareMeta {
            artifact: name.to_string(),
            inputs: inputs.clone(),
        };
        std::fs::write(&meta_path, serde_json::to_string_pretty(&meta)? + "\n").map_err(io_err(&meta_path))?;
    }
    Ok(serde_json::json!({
        "n": sa.len(),
        "mean_a": report.summary_a.mean,
        "mean_b": report.summary_b.mean,
        "percent_a_better": report.percent_a_better,
        "t_statistic": report.t_statistic,
        "p_value": report.p_value
    }))
}

pub fn format_suite(rows: &[SuiteRow]) -> String {
    let mut s = format!("{:<20} {:>6} {:>12} {:>8} {:>6}  result\n", "check", "seeds", "max_rel_err", "coords", "kinks");
    for r in rows {
        s += &format!(
            "{:<20} {:>6} {:>12.3e} {:>8} {:>6}  {}\n",
            r.name,
            r.seeds,
            r.max_rel_err,
            r.checked,
            r.crossed_kink,
            if r.passed() { "PASS" } else { "FAIL" }
        );
    }
    s
}

pub fn gradcheck(seeds: u64, out: Option<&Path>) -> Result<(String, usize)> {
    if seeds == 0 {
        return Err(CliError::Usage("--seeds must be positive".into()));
    }
    let seeds: Vec<u64> = (1..=seeds).collect();
    let rows = gradsuite::full_suite(&seeds)?;
    if let Some(dir) = out {
        let path = dir.join("gradcheck.csv");
        let mut w = create_new(&path)?;
        writeln!(w, "name,seeds,max_rel_err,checked,crossed_kink,passed").map_err(io_err(&path))?;
        for r in &rows {
            writeln!(w, "{},{},{:e},{},{},{}", r.name, r.seeds, r.max_rel_err, r.checked, r.crossed_kink, r.passed())
                .map_err(io_err(&path))?;
        }
        w.flush().map_err(io_err(&path))?;
    }
    let failed = rows.iter().filter(|r| !r.passed()).count();
    Ok((format_suite(&rows), failed))
}

/// One cell of the ablation grid.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationCell {
    pub steps: usize,
    pub codesign: bool,
    pub mean_ssim: f64,
    pub std_ssim: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationReport {
    pub cells: Vec<AblationCell>,
    /// Per step count: co-design on vs off.
    pub codesign_gain: Vec<(usize, metrics::ComparisonReport)>,
    /// Largest vs smallest step count, co-design on.
    pub steps_gain: metrics::ComparisonReport,
}

pub const ABLATION_STEPS: [usize; 3] = [1, 2, 4];

pub fn ablate(run: &RunArgs, dataset: &Path) -> Result<AblationReport> {
    let (cfg, out) = run.resolve()?;
    if !cfg.train.method.has_sampler_params() {
        return Err(CliError::Usage(format!("method {:?} has no sampler to ablate", cfg.train.method)));
    }
    let ds = load_ds(dataset, &cfg)?;
    let pre_cfg = TrainConfig {
        method: Method::Random,
        codesign: true,
        ..cfg.train.clone()
    };
    let (pretrained, _) = pipeline::train_model(&pre_cfg, &ds)?;
    let mut cells = Vec::new();
    let mut scores = Vec::new();
    for steps in ABLATION_STEPS {
        for codesign in [true, false] {
            let tc = TrainConfig {
                steps,
                codesign,
                ..cfg.train.clone()
            };
            let (model, log) = if codesign {
                pipeline::train_model(&tc, &ds)?
            } else {
                seqmri::baselines::codesign_off_train(&tc, &ds, &pretrained)?
            };
            let mut cell_cfg = cfg.clone();
            cell_cfg.train = tc;
            let dir = out.join(format!("steps{steps}_codesign_{}", if codesign { "on" } else { "off" }));
            save_model(&dir, &cell_cfg, &model, &log)?;
            let ev = pipeline::evaluate(&model, &ds, Split::Test, cell_cfg.train.eval_seed)?;
            write_artifact(&dir.join("metrics.csv"), &cell_cfg, |w| Ok(metrics::write_metrics_csv(w, &ev.metrics)?))?;
            let s: Vec<f64> = ev.metrics.iter().map(|m| m.ssim).collect();
            let sum = Summary::of(&s);
            cells.push(AblationCell {
                steps,
                codesign,
                mean_ssim: sum.mean,
                std_ssim: sum.std,
            });
            scores.push(s);
        }
    }
    let codesign_gain = ABLATION_STEPS
        .iter()
        .enumerate()
        .map(|(k, &steps)| Ok((steps, metrics::compare(&scores[2 * k], &scores[2 * k + 1])?)))
        .collect::<Result<Vec<_>>>()?;
    let steps_gain = metrics::compare(&scores[2 * (ABLATION_STEPS.len() - 1)], &scores[0])?;
    let report = AblationReport {
        cells,
        codesign_gain,
        steps_gain,
    };
    let grid = out.join("ablation.csv");
    write_artifact(&grid, &cfg, |w| {
        let e = io_err(&grid);
        writeln!(w, "steps,codesign_on,codesign_off").map_err(e)?;
        for k in 0..ABLATION_STEPS.len() {
            let (on, off) = (&report.cells[2 * k], &report.cells[2 * k + 1]);
            writeln!(w, "{},{},{}", on.steps, on.mean_ssim, off.mean_ssim).map_err(io_err(&grid))?;
        }
        Ok(())
    })?;
    write_artifact(&out.join("ablation.json"), &cfg, |w| Ok(serde_json::to_writer_pretty(w, &report)?))?;
    Ok(report)
}

/// Runs one parsed command; returns what goes to stdout.
pub fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Datagen { run } => Ok(datagen(&run)?.to_string()),
        Command::Train { run, dataset } => Ok(train(&run, &dataset)?.to_string()),
        Command::Eval {
            checkpoint,
            dataset,
            out,
            split,
            dump,
        } => Ok(eval(&checkpoint, &dataset, &out, &split, dump)?.to_string()),
        Command::Compare { a, b, out } => Ok(compare(&a, &b, &out)?.to_string()),
        Command::Gradcheck { seeds, out } => {
            let (table, failed) = gradcheck(seeds, out.as_deref())?;
            print!("{table}");
            if failed > 0 {
                return Err(CliError::GradCheck(failed));
            }
            Ok(serde_json::json!({ "gradcheck": "pass" }).to_string())
        }
        Command::Ablate { run, dataset } => {
            let r = ablate(&run, &dataset)?;
            Ok(serde_json::to_string(&r.cells)?)
        }
    }
}
