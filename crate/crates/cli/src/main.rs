use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ctxpair::dataset_io::{save_dataset, DataError};
use ctxpair::eval::{
    mil_encoder, probe_encoder, train_supervised_baseline, MilConfig, SupervisedConfig,
};
use ctxpair::experiment::{
    append_results, mismatch_report, run_seed, write_csv, DatasetSource, ExperimentConfig, ExperimentError, Lab,
    SweepRow, ALPHA_GRID, DISTANCE_GRID,
};
use ctxpair::sampler::{DistanceCap, SamplingMode};
use ctxpair::slidegen::{generate_dataset, Dataset, GenConfig, SlideError, SplitCounts};
use ctxpair::ssl::SslMethod;
use ctxpair::EncoderF32;

#[derive(Parser)]
#[command(name = "ctxpair", version, about = "Contextual positive pairs for SSL on gridded slides")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and write it to --out.
    Generate(Shared),
    /// Pretrain one encoder; per-epoch losses stream to stdout as JSON lines.
    Pretrain(Shared),
    /// Linear-probe a saved encoder (or train the supervised baseline).
    Probe {
        #[command(flatten)]
        shared: Shared,
        #[arg(long, required_unless_present = "supervised")]
        encoder: Option<PathBuf>,
        #[arg(long)]
        supervised: bool,
    },
    /// Attention MIL on bags embedded by a saved encoder.
    Mil {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        encoder: PathBuf,
    },
    /// Neighbour label-mismatch rates on non-benign slides.
    Mismatch {
        #[command(flatten)]
        shared: Shared,
        #[arg(long, value_delimiter = ',', default_values_t = DISTANCE_GRID)]
        distances: Vec<usize>,
    },
    /// Accuracy gain over α = 0 for each α.
    SweepAlpha {
        #[command(flatten)]
        shared: Shared,
        #[arg(long, value_delimiter = ',', default_values_t = ALPHA_GRID)]
        alphas: Vec<f64>,
    },
    /// Accuracy gain over standard sampling for each distance cap (α = 0.5).
    SweepDistance {
        #[command(flatten)]
        shared: Shared,
        #[arg(long, value_delimiter = ',', default_values_t = DISTANCE_GRID.map(DistanceCap::Bounded))]
        distances: Vec<DistanceCap>,
        #[arg(long, value_delimiter = ',', default_values_t = SslMethod::ALL)]
        methods: Vec<SslMethod>,
    },
    /// Pretrain, probe and MIL for every seed; append rows to results.csv.
    Run {
        #[command(flatten)]
        shared: Shared,
        /// Replace rows that already exist for the same run.
        #[arg(long)]
        force: bool,
    },
}

#[derive(Args, Clone, Default)]
struct Shared {
    /// Experiment config (JSON); `generate` also accepts a bare generator config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use a saved dataset directory instead of generating one.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    method: Option<SslMethod>,
    #[arg(long)]
    sampling: Option<SamplingMode>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    distance: Option<DistanceCap>,
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Experiment(ExperimentError),
    Io(PathBuf, std::io::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Experiment(e) => e.exit_code() as u8,
            CliError::Io(..) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "invalid configuration: {m}"),
            CliError::Experiment(e) => write!(f, "{e}"),
            CliError::Io(p, e) => write!(f, "{}: {e}", p.display()),
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        CliError::Experiment(e)
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Experiment(e.into())
    }
}

impl From<SlideError> for CliError {
    fn from(e: SlideError) -> Self {
        CliError::Experiment(e.into())
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Io(path.to_path_buf(), e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::Io(parent.to_path_buf(), e))?;
    }
    fs::write(path, text).map_err(|e| CliError::Io(path.to_path_buf(), e))
}

impl Shared {
    /// The config file (or defaults) with command-line overrides applied.
    fn experiment(&self) -> Result<ExperimentConfig> {
        let mut c: ExperimentConfig = match &self.config {
            Some(path) => read_json(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(path) = &self.dataset {
            c.dataset = DatasetSource::Path { path: path.clone() };
        }
        if let Some(method) = self.method {
            c = c.with_method(method);
        }
        if let Some(sampling) = self.sampling {
            c.sampling = sampling;
            if sampling == SamplingMode::Standard {
                c.alpha = 0.0;
                c.distance = None;
            }
        }
        if let Some(alpha) = self.alpha {
            c.alpha = alpha;
        }
        if let Some(d) = self.distance {
            c.distance = Some(d);
        }
        if let Some(seed) = self.seed {
            c.seeds = vec![seed];
        }
        c.validate()?;
        Ok(c)
    }

    fn seed(&self, c: &ExperimentConfig) -> u64 {
        self.seed.unwrap_or(c.seeds[0])
    }
}

fn load_encoder(path: &Path) -> Result<EncoderF32> {
    read_json(path)
}

fn print_json(value: &serde_json::Value) {
    println!("{value}");
}

fn generate(shared: &Shared) -> Result<()> {
    let (mut generator, counts) = match &shared.config {
        Some(path) => {
            let value: serde_json::Value = read_json(path)?;
            if value.get("dataset").is_some() || value.get("method").is_some() {
                let c: ExperimentConfig =
                    serde_json::from_value(value).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
                match c.dataset {
                    DatasetSource::Synthetic { generator, counts } => (generator, counts),
                    DatasetSource::Path { .. } => {
                        return Err(CliError::Config("generate needs a synthetic dataset source".into()))
                    }
                }
            } else {
                let g: GenConfig =
                    serde_json::from_value(value).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
                (g, SplitCounts::default())
            }
        }
        None => (GenConfig::default(), SplitCounts::default()),
    };
    if let Some(seed) = shared.seed {
        generator.seed = seed;
    }
    let dataset = generate_dataset(&generator, &counts)?;
    let manifest = save_dataset(&dataset, &shared.out)?;
    print_json(&serde_json::json!({
        "dataset_id": manifest.dataset_id,
        "slides": dataset.all_slides().count(),
        "content_hash": dataset.content_hash(),
        "out": shared.out,
    }));
    Ok(())
}

fn pretrain_cmd(shared: &Shared) -> Result<()> {
    let c = shared.experiment()?;
    let dataset = c.dataset.load()?;
    let seed = shared.seed(&c);
    let run = run_seed(&dataset, &c, seed)?;
    let mut lines = String::new();
    for e in &run.trace {
        let line = serde_json::json!({ "epoch": e.epoch, "loss": e.loss }).to_string();
        println!("{line}");
        lines.push_str(&line);
        lines.push('\n');
    }
    write_text(&shared.out.join("metrics.jsonl"), &lines)?;
    let encoder = serde_json::to_string(&run.encoder).expect("encoder serializes");
    write_text(&shared.out.join("encoder.json"), &encoder)?;
    write_text(&shared.out.join("config.json"), &serde_json::to_string_pretty(&c).expect("config serializes"))?;
    Ok(())
}

fn probe_cmd(shared: &Shared, encoder: Option<&Path>, supervised: bool) -> Result<()> {
    let c = shared.experiment()?;
    let dataset = c.dataset.load()?;
    let seed = shared.seed(&c);
    let eval_err = |source| ExperimentError::Eval { seed, source };
    let (kind, test) = match encoder {
        Some(path) if !supervised => {
            let enc = load_encoder(path)?;
            ("linear_probe", probe_encoder(&enc, &dataset, &c.probe, seed).map_err(eval_err)?.test)
        }
        _ => {
            let cfg = SupervisedConfig { widths: c.train.widths, ..SupervisedConfig::default() };
            ("supervised", train_supervised_baseline::<f32>(&dataset, &cfg, seed).map_err(eval_err)?.test)
        }
    };
    let row = serde_json::json!({ "kind": kind, "seed": seed, "accuracy": test.accuracy, "auroc": test.auroc });
    print_json(&row);
    write_text(&shared.out.join(format!("{kind}.json")), &row.to_string())
}

fn mil_cmd(shared: &Shared, encoder: &Path) -> Result<()> {
    let c = shared.experiment()?;
    let dataset = c.dataset.load()?;
    let seed = shared.seed(&c);
    let enc = load_encoder(encoder)?;
    let mil_cfg: &MilConfig = &c.mil;
    let out = mil_encoder(&enc, &dataset.train, &dataset.test, mil_cfg, seed)
        .map_err(|source| ExperimentError::Eval { seed, source })?;
    let row = serde_json::json!({
        "seed": seed, "train_accuracy": out.train_accuracy, "accuracy": out.test.accuracy, "auroc": out.test.auroc,
    });
    print_json(&row);
    write_text(&shared.out.join("mil.json"), &row.to_string())
}

fn dataset_for(shared: &Shared) -> Result<Dataset> {
    Ok(shared.experiment()?.dataset.load()?)
}

fn mismatch_cmd(shared: &Shared, distances: &[usize]) -> Result<()> {
    let rows = mismatch_report(&dataset_for(shared)?, distances)?;
    for r in &rows {
        print_json(&serde_json::json!({ "d": r.d, "mismatch_fraction": r.mismatch_fraction }));
    }
    write_csv(&shared.out.join("mismatch.csv"), &rows)?;
    Ok(())
}

fn emit_sweep(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut stdout = std::io::stdout().lock();
    for r in rows {
        let _ = writeln!(
            stdout,
            "{} {} alpha={} d={} seed={} probe={:.4} gain={:+.4} mil={:.4}",
            r.result.method,
            r.result.sampling,
            r.result.alpha,
            r.result.d.map(|d| d.to_string()).unwrap_or_else(|| "-".into()),
            r.result.seed,
            r.result.probe_accuracy,
            r.probe_gain,
            r.result.mil_accuracy
        );
    }
    write_csv(path, rows)?;
    Ok(())
}

fn run_cmd(shared: &Shared, force: bool) -> Result<()> {
    let c = shared.experiment()?;
    let mut lab = Lab::new(c.dataset.load()?);
    let rows = lab.run(&c)?;
    for r in &rows {
        print_json(&serde_json::to_value(r).expect("result serializes"));
    }
    append_results(&shared.out.join("results.csv"), &rows, force)?;
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(shared) => generate(&shared),
        Command::Pretrain(shared) => pretrain_cmd(&shared),
        Command::Probe { shared, encoder, supervised } => probe_cmd(&shared, encoder.as_deref(), supervised),
        Command::Mil { shared, encoder } => mil_cmd(&shared, &encoder),
        Command::Mismatch { shared, distances } => mismatch_cmd(&shared, &distances),
        Command::SweepAlpha { shared, alphas } => {
            let c = shared.experiment()?;
            let rows = Lab::new(c.dataset.load()?).sweep_alpha(&c, &alphas)?;
            emit_sweep(&shared.out.join("sweep_alpha.csv"), &rows)
        }
        Command::SweepDistance { shared, distances, methods } => {
            let c = shared.experiment()?;
            let rows = Lab::new(c.dataset.load()?).sweep_distance(&c, &methods, &distances)?;
            emit_sweep(&shared.out.join("sweep_distance.csv"), &rows)
        }
        Command::Run { shared, force } => run_cmd(&shared, force),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
