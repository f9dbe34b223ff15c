//! `lingrid` command-line driver.
//!
//! Exit codes: 0 success, 1 other errors (I/O and the like), 2 configuration
//! error, 3 numeric failure (non-finite loss or gradient), 4 verification
//! failure (gradient check or failed ablation runs).

use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use lingrid::association::Mode;
use lingrid::config::RunConfig;
use lingrid::datagen::{content_hash, decode_ppm, gen_dataset, read_dataset, write_dataset, DatasetDir, Split, TupleSource};
use lingrid::evalkit::{attention_heatmap, metrics_table, text_to_image_retrieve, write_heatmap};
use lingrid::gradsuite::{run_suite, SuiteConfig};
use lingrid::pipeline::{
    self, raw_results_csv, summarize, summary_table, RunManifest, RunResult, LAMBDA_T_SWEEP, MANIFEST_FILE,
    METRICS_FILE,
};
use lingrid::textpipe::{extract_phrases, format_phrase_line, tokenize, Lexicon};

/// Failure that maps to a specific exit code.
#[derive(Debug, thiserror::Error)]
enum Exit {
    #[error("{0}")]
    Verification(String),
    #[error("{0}")]
    Numeric(String),
}

#[derive(Parser)]
#[command(name = "lingrid", version, about = "Language-supervised person re-identification at desk scale")]
struct Cli {
    #[command(flatten)]
    cfg: ConfigArgs,

    /// Log progress (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration file (key = value lines).
    #[arg(long, global = true, env = "LINGRID_CONFIG")]
    config: Option<PathBuf>,

    /// Override one configuration key, e.g. `--set epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    GenData {
        #[arg(long, env = "LINGRID_DATA")]
        out: PathBuf,
        /// Replace an existing dataset in `out`.
        #[arg(long)]
        force: bool,
    },
    /// Train one model and evaluate it on the test split.
    Train {
        #[arg(long, env = "LINGRID_DATA")]
        data: PathBuf,
        /// Run directory for checkpoint, losses, metrics and manifest.
        #[arg(long, env = "LINGRID_RUN")]
        out: PathBuf,
    },
    /// Image-only evaluation of a trained run.
    Eval {
        #[arg(long, env = "LINGRID_RUN")]
        run: PathBuf,
        #[arg(long, env = "LINGRID_DATA")]
        data: PathBuf,
        /// Metrics CSV path (default: `<run>/metrics.csv`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate every mode over several seeds.
    Ablate {
        #[arg(long, env = "LINGRID_DATA")]
        data: PathBuf,
        /// Directory for per-run outputs and the combined tables.
        #[arg(long, env = "LINGRID_OUT")]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        #[arg(long, value_delimiter = ',')]
        modes: Option<Vec<Mode>>,
        /// Sweep the text identity loss weight in global-association mode
        /// instead of comparing modes.
        #[arg(long)]
        lambda_t_sweep: bool,
        /// Sweep values (default 0,0.05,0.1,0.5,1).
        #[arg(long, value_delimiter = ',', requires = "lambda_t_sweep")]
        values: Option<Vec<f64>>,
    },
    /// Double-precision gradient check of every op and loss.
    Gradcheck {
        /// Random micro-batches per loss.
        #[arg(long, default_value_t = 10)]
        batches: usize,
    },
    /// Rank gallery images by relevance to a description.
    Retrieve {
        #[arg(long, env = "LINGRID_RUN")]
        run: PathBuf,
        #[arg(long, env = "LINGRID_DATA")]
        data: PathBuf,
        #[arg(long)]
        text: String,
        #[arg(long, default_value_t = 10)]
        top: usize,
    },
    /// Attention heat map of a phrase over an image (.pgm and .csv).
    Heatmap {
        #[arg(long, env = "LINGRID_RUN")]
        run: PathBuf,
        /// Binary PPM image.
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        phrase: String,
        /// Output path without extension.
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract noun phrases, one input line per output line.
    Phrases {
        /// Input file; standard input when omitted or `-`.
        file: Option<PathBuf>,
    },
    /// Print the configuration with every key documented.
    Config,
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path).with_context(|| format!("loading config {}", path.display()))?,
        None => RunConfig::default(),
    };
    if let Ok(seed) = std::env::var("LINGRID_SEED") {
        cfg.set("seed", &seed).context("LINGRID_SEED")?;
    }
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| lingrid::Error::Config(format!("expected KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn gen_data(cfg: &RunConfig, out: &Path, force: bool) -> Result<()> {
    let ds = gen_dataset(&cfg.data, &Lexicon::default())?;
    write_dataset(out, &ds, force)?;
    println!(
        "wrote {}: {} train identities, {} train tuples, {} test tuples ({} query, {} gallery), vocabulary {}",
        out.display(),
        ds.num_train_identities(),
        ds.train.len(),
        ds.query.len() + ds.gallery.len(),
        ds.query.len(),
        ds.gallery.len(),
        ds.vocab.len()
    );
    println!("content hash {}", content_hash(out)?);
    Ok(())
}

fn train(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let start = Instant::now();
    let ds = read_dataset(data, &Lexicon::default()).with_context(|| format!("reading dataset {}", data.display()))?;
    let run = pipeline::train_to_dir(cfg, &ds, out).map_err(numeric)?;
    let metrics = pipeline::evaluate(&run, &ds)?;
    pipeline::write_metrics(&out.join(METRICS_FILE), &[(cfg.mode.to_string(), cfg.seed, metrics)])?;
    let manifest = RunManifest {
        config: cfg.to_map(),
        dataset_hash: content_hash(data)?,
        seed: cfg.seed,
        mode: cfg.mode,
        metrics: Some(metrics),
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    manifest.save(&out.join(MANIFEST_FILE))?;
    print!("{}", metrics_table(&[(cfg.mode.to_string(), metrics)]));
    Ok(())
}

fn eval(run_dir: &Path, data: &Path, out: Option<PathBuf>) -> Result<()> {
    let run = pipeline::load_trained(run_dir).with_context(|| format!("loading run {}", run_dir.display()))?;
    let source = DatasetDir::open(data)?;
    let metrics = pipeline::evaluate(&run, &source)?;
    let seed = RunConfig::load(&run_dir.join(pipeline::CONFIG_FILE))?.seed;
    let path = out.unwrap_or_else(|| run_dir.join(METRICS_FILE));
    pipeline::write_metrics(&path, &[(run.mode.to_string(), seed, metrics)])?;
    print!("{}", metrics_table(&[(run.mode.to_string(), metrics)]));
    Ok(())
}

fn ablate(
    cfg: &RunConfig,
    data: &Path,
    out: &Path,
    seeds: &[u64],
    modes: Option<Vec<Mode>>,
    sweep: Option<Vec<f64>>,
) -> Result<()> {
    if seeds.is_empty() {
        bail!(lingrid::Error::Config("at least one seed is required".into()));
    }
    let ds = read_dataset(data, &Lexicon::default())?;
    fs::create_dir_all(out)?;
    let (results, stem): (Vec<RunResult>, &str) = match sweep {
        Some(values) => (pipeline::sweep_lambda_t(cfg, &ds, &values, seeds), "lambda_t"),
        None => {
            let modes = modes.unwrap_or_else(|| Mode::ALL.to_vec());
            (pipeline::ablate(cfg, &ds, &modes, seeds, Some(out)), "ablation")
        }
    };
    let rows = summarize(&results);
    let table = summary_table(&rows);
    fs::write(out.join(format!("{stem}_raw.csv")), raw_results_csv(&results))?;
    fs::write(out.join(format!("{stem}_summary.txt")), &table)?;
    print!("{table}");
    let failed: Vec<&RunResult> = results.iter().filter(|r| r.outcome.is_err()).collect();
    if failed.is_empty() {
        Ok(())
    } else if failed.iter().any(|r| r.numeric_failure) {
        Err(Exit::Numeric(format!("{} run(s) failed with non-finite values", failed.len())).into())
    } else {
        Err(Exit::Verification(format!("{} run(s) failed", failed.len())).into())
    }
}

fn gradcheck(batches: usize) -> Result<()> {
    let report = run_suite(&SuiteConfig {
        batches,
        ..Default::default()
    })?;
    print!("{}", report.render());
    if report.passed() {
        Ok(())
    } else {
        Err(Exit::Verification(format!("{} gradient check(s) failed", report.failures().len())).into())
    }
}

fn retrieve(run_dir: &Path, data: &Path, text: &str, top: usize) -> Result<()> {
    let run = pipeline::load_trained(run_dir)?;
    let vocab = pipeline::load_run_vocab(run_dir)?;
    let source = DatasetDir::open(data)?;
    let gallery = source.indices(Split::Gallery);
    let globals = gallery
        .iter()
        .map(|&i| run.model.image_global(&run.store, &source.image(i)?.to_tensor::<f32>()))
        .collect::<lingrid::Result<Vec<_>>>()?;
    let words = vocab.encode(&tokenize(text));
    if words.is_empty() {
        bail!(lingrid::Error::EmptySequence);
    }
    let ranked = text_to_image_retrieve(&run.model, &run.store, run.mode, &words, &globals)?;
    println!("rank\ttuple\tidentity\tscore");
    for (rank, (pos, score)) in ranked.into_iter().take(top).enumerate() {
        let idx = gallery[pos];
        println!("{}\t{}\t{}\t{:.6}", rank + 1, idx, source.label(idx), score);
    }
    Ok(())
}

fn heatmap(run_dir: &Path, image: &Path, phrase: &str, out: &Path) -> Result<()> {
    let run = pipeline::load_trained(run_dir)?;
    let vocab = pipeline::load_run_vocab(run_dir)?;
    let img = decode_ppm(&fs::read(image).with_context(|| format!("reading {}", image.display()))?)?;
    let words = vocab.encode(&tokenize(phrase));
    if words.is_empty() {
        bail!(lingrid::Error::EmptySequence);
    }
    let (weights, grid) = run.model.phrase_attention(&run.store, &img.to_tensor::<f32>(), &words)?;
    let heat = attention_heatmap(&weights, &run.model.pooled_bin_pixels(), (img.height, img.width))?;
    write_heatmap(&heat, out)?;
    println!("attention over {}x{} bins (row-major):", grid.0, grid.1);
    for row in weights.chunks(grid.1) {
        println!("{}", row.iter().map(|w| format!("{w:.4}")).collect::<Vec<_>>().join(" "));
    }
    println!("wrote {}.pgm and {}.csv", out.display(), out.display());
    Ok(())
}

fn phrases(file: Option<PathBuf>) -> Result<()> {
    let lexicon = Lexicon::default();
    let input: Box<dyn BufRead> = match file {
        Some(path) if path != Path::new("-") => Box::new(io::BufReader::new(
            fs::File::open(&path).with_context(|| format!("opening {}", path.display()))?,
        )),
        _ => Box::new(io::stdin().lock()),
    };
    let mut stdout = io::stdout().lock();
    for line in input.lines() {
        writeln!(stdout, "{}", format_phrase_line(&extract_phrases(&line?, &lexicon)))?;
    }
    Ok(())
}

fn numeric(e: lingrid::Error) -> anyhow::Error {
    if e.is_numeric() {
        Exit::Numeric(format!("{e}; the last completed epoch's checkpoint is kept")).into()
    } else {
        e.into()
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.cfg)?;
    match cli.command {
        Command::GenData { out, force } => gen_data(&cfg, &out, force),
        Command::Train { data, out } => train(&cfg, &data, &out),
        Command::Eval { run, data, out } => eval(&run, &data, out),
        Command::Ablate {
            data,
            out,
            seeds,
            modes,
            lambda_t_sweep,
            values,
        } => {
            let sweep = lambda_t_sweep.then(|| values.unwrap_or_else(|| LAMBDA_T_SWEEP.to_vec()));
            ablate(&cfg, &data, &out, &seeds, modes, sweep)
        }
        Command::Gradcheck { batches } => gradcheck(batches),
        Command::Retrieve { run, data, text, top } => retrieve(&run, &data, &text, top),
        Command::Heatmap {
            run,
            image,
            phrase,
            out,
        } => heatmap(&run, &image, &phrase, &out),
        Command::Phrases { file } => phrases(file),
        Command::Config => {
            print!("{}", RunConfig::documented_defaults());
            if cli.cfg.config.is_some() || !cli.cfg.overrides.is_empty() {
                println!("\n# effective\n{}", cfg.to_text());
            }
            Ok(())
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(exit) = err.downcast_ref::<Exit>() {
        return match exit {
            Exit::Numeric(_) => 3,
            Exit::Verification(_) => 4,
        };
    }
    match err.downcast_ref::<lingrid::Error>() {
        Some(e) if e.is_numeric() => 3,
        Some(e) if e.is_config() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
