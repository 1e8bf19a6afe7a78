use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use tracing::info;
use tracing_subscriber::EnvFilter;

use ttabench::harness::{
    aggregate, read_reports_csv, render_table, run_bench, sample_sources, sample_target, source_specs, target_spec,
    write_reports_csv, BenchConfig, SourceBundle, Summary, TableStyle,
};
use ttabench::model::{Checkpoint, NormKind};
use ttabench::shiftlab::{load_dataset, save_dataset};
use ttabench::similarity::{similarity_score, Bandwidth, Estimator, MmdConfig};

#[derive(Parser, Debug)]
#[command(name = "ttabench", version, about = "Test-time adaptation benchmark on synthetic domain shifts")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// More log output on stderr (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
    Md,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample source and target datasets for every scenario of a config.
    GenData {
        /// Run-config file (TOML). Defaults to the built-in suite.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Seed (defaults to the config's first seed).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Pretrain the source model and save a checkpoint.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint file to write.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Normalization of the saved model.
        #[arg(long, value_enum, default_value = "layer-norm")]
        norm: NormArg,
    },
    /// Similarity score between the feature columns of two dataset files.
    Similarity {
        file_a: PathBuf,
        file_b: PathBuf,
        /// Fixed RBF bandwidth σ instead of the median heuristic.
        #[arg(long)]
        bandwidth: Option<f64>,
        /// Use the unbiased estimator.
        #[arg(long)]
        unbiased: bool,
        /// Per-side sample cap.
        #[arg(long, default_value_t = 2000)]
        max_samples: usize,
        /// Compare encoder features of this checkpoint instead of raw inputs.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the scenario × method × seed grid.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory for runs.csv and summary.json.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run this single seed instead of the configured list.
        #[arg(long)]
        seed: Option<u64>,
        /// What to print on stdout.
        #[arg(long, value_enum, default_value = "md")]
        format: Format,
    },
    /// Summarize a runs CSV produced by `bench`.
    Report {
        csv: PathBuf,
        #[arg(long, value_enum, default_value = "md")]
        format: Format,
    },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum NormArg {
    LayerNorm,
    BatchNorm,
    Iabn,
    Rbn,
}

impl From<NormArg> for NormKind {
    fn from(n: NormArg) -> Self {
        match n {
            NormArg::LayerNorm => NormKind::LayerNorm,
            NormArg::BatchNorm => NormKind::BatchNorm,
            NormArg::Iabn => NormKind::Iabn,
            NormArg::Rbn => NormKind::Rbn,
        }
    }
}

fn emit(line: &str) -> Result<()> {
    let mut out = io::stdout().lock();
    out.write_all(line.as_bytes())?;
    out.write_all(b"\n")?;
    Ok(())
}

fn broken_pipe(e: &anyhow::Error) -> bool {
    e.chain()
        .filter_map(|c| c.downcast_ref::<io::Error>())
        .any(|io| io.kind() == io::ErrorKind::BrokenPipe)
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<BenchConfig> {
    let mut cfg = match path {
        Some(p) => BenchConfig::load(p)?,
        None => BenchConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seeds = vec![s];
    }
    cfg.validate()?;
    Ok(cfg)
}

fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect()
}

fn gen_data(config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let seed = cfg.seeds[0];
    let scenarios = cfg.scenarios();
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut written = Vec::new();
    let mut pools: Vec<String> = Vec::new();
    for s in &scenarios {
        // most scenarios share their sources; write each pool once
        let key = serde_json::to_string(&s.sources)?;
        if !pools.contains(&key) {
            let idx = pools.len();
            pools.push(key);
            let specs = source_specs(&cfg, &s.sources, seed)?;
            for (i, data) in sample_sources(&cfg, &specs, seed)?.iter().enumerate() {
                let path = out.join(format!("source-{idx}-{i}.csv"));
                save_dataset(data, &path)?;
                written.push(path);
            }
        }
        let spec = target_spec(&cfg, s, seed)?;
        let path = out.join(format!("{}.csv", file_stem(&s.name)));
        save_dataset(&sample_target(&cfg, &spec, seed)?, &path)?;
        written.push(path);
    }
    for p in written {
        emit(&p.display().to_string())?;
    }
    Ok(())
}

fn pretrain_cmd(config: Option<&Path>, out: &Path, seed: Option<u64>, norm: NormKind) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let seed = cfg.seeds[0];
    let scenario = cfg.scenarios().remove(0);
    let bundle = SourceBundle::build(&cfg, &scenario.sources, seed, norm != NormKind::LayerNorm)?;
    let (model, acc) = if norm == NormKind::LayerNorm {
        (bundle.layer_norm.clone(), bundle.layer_norm_val_accuracy)
    } else {
        (bundle.model_for(norm)?, bundle.batch_norm_val_accuracy.unwrap_or(f64::NAN))
    };
    Checkpoint::new(model, Some(acc)).save(out)?;
    info!(val_accuracy = acc, path = %out.display(), "checkpoint written");
    emit(&serde_json::json!({ "checkpoint": out, "source_val_accuracy": acc }).to_string())?;
    Ok(())
}

fn similarity_cmd(
    a: &Path,
    b: &Path,
    bandwidth: Option<f64>,
    unbiased: bool,
    max_samples: usize,
    checkpoint: Option<&Path>,
) -> Result<()> {
    let da = load_dataset(a).with_context(|| format!("reading {}", a.display()))?;
    let db = load_dataset(b).with_context(|| format!("reading {}", b.display()))?;
    let cfg = MmdConfig {
        bandwidth: bandwidth.map_or(Bandwidth::Median, Bandwidth::Fixed),
        estimator: if unbiased { Estimator::Unbiased } else { Estimator::Biased },
        max_samples,
    };
    let result = match checkpoint {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            let fa = ck.model.infer(&da.features)?.features;
            let fb = ck.model.infer(&db.features)?.features;
            similarity_score(&fa, &fb, &cfg)?
        }
        None => similarity_score(&da.features, &db.features, &cfg)?,
    };
    emit(&serde_json::to_string_pretty(&result)?)?;
    Ok(())
}

fn summary_csv(summary: &Summary) -> String {
    let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = String::from("scenario,similarity,method,family,runs,failed,mean,sd,mean_true,delta,best\n");
    for r in &summary.rows {
        for c in &r.cells {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                r.scenario,
                r.similarity,
                c.method,
                c.family,
                c.runs,
                c.failed,
                f(c.mean),
                f(c.sd),
                f(c.mean_true),
                f(c.delta),
                c.best
            ));
        }
    }
    out
}

fn print_summary(summary: &Summary, format: Format) -> Result<()> {
    let text = match format {
        Format::Md => render_table(summary, TableStyle::Markdown),
        Format::Json => serde_json::to_string_pretty(summary)? + "\n",
        Format::Csv => summary_csv(summary),
    };
    io::stdout().write_all(text.as_bytes())?;
    Ok(())
}

fn bench(config: Option<&Path>, out: Option<&Path>, seed: Option<u64>, format: Format) -> Result<bool> {
    let cfg = load_config(config, seed)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    info!(
        scenarios = cfg.scenarios().len(),
        methods = cfg.methods.len(),
        seeds = cfg.seeds.len(),
        "starting bench"
    );
    let reports = run_bench(&cfg)?;
    let summary = aggregate(&reports)?;
    if let Some(dir) = out {
        let f = fs::File::create(dir.join("runs.csv"))?;
        write_reports_csv(&reports, io::BufWriter::new(f))?;
        let json = serde_json::json!({ "summary": summary, "runs": reports });
        fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&json)? + "\n")?;
    }
    if format == Format::Csv && out.is_none() {
        write_reports_csv(&reports, io::stdout().lock())?;
    } else {
        print_summary(&summary, format)?;
    }
    for r in summary.rows.iter() {
        if let Some(best) = r.best() {
            info!(scenario = %r.scenario, %best, "best method");
        }
    }
    Ok(summary.failed_runs == 0)
}

fn report(path: &Path, format: Format) -> Result<()> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if bytes.iter().all(u8::is_ascii_whitespace) {
        return emit("no runs");
    }
    let reports = read_reports_csv(bytes.as_slice())?;
    if reports.is_empty() {
        return emit("no runs");
    }
    print_summary(&aggregate(&reports)?, format)
}

fn run(cli: Cli) -> Result<bool> {
    if let Some(n) = cli.workers {
        if n == 0 {
            bail!("--workers must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.command {
        Command::GenData { config, out, seed } => gen_data(config.as_deref(), &out, seed).map(|_| true),
        Command::Pretrain { config, out, seed, norm } => {
            pretrain_cmd(config.as_deref(), &out, seed, norm.into()).map(|_| true)
        }
        Command::Similarity {
            file_a,
            file_b,
            bandwidth,
            unbiased,
            max_samples,
            checkpoint,
        } => similarity_cmd(&file_a, &file_b, bandwidth, unbiased, max_samples, checkpoint.as_deref()).map(|_| true),
        Command::Bench {
            config,
            out,
            seed,
            format,
        } => bench(config.as_deref(), out.as_deref(), seed, format),
        Command::Report { csv, format } => report(&csv, format).map(|_| true),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    tracing_subscriber::fmt()
        .with_writer(io::stderr)
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(level)))
        .init();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: some runs failed");
            ExitCode::from(1)
        }
        Err(e) if broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
