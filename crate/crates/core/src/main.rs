use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use piza::config::RunConfig;
use piza::evaluation::{compare_report, report_csv, write_report};
use piza::experiment::{
    evaluate, extend, fit_prior, pretrain_backbone, run_experiment, run_method, synth_split, train_localizer, Method,
    ResultRecord, Split,
};
use piza::io::{read_jsonl, write_jsonl};
use piza::localizer::ToyModel;
use piza::prior::RatioDistribution;
use piza::search::ExtendedSample;
use piza::synth::{read_dataset, write_dataset, ImageSource, SynthSample};
use piza::train::write_log_csv;
use piza::Error;

#[derive(Parser)]
#[command(name = "piza", version, about = "Zoom-based small-object localization toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    Proxy,
}

#[derive(Clone, Copy, ValueEnum)]
enum Stage {
    Pretrain,
    SingleShot,
    Piza,
}

#[derive(Clone, Copy, ValueEnum)]
enum InferMethod {
    Piza,
    Fixed,
    SingleShot,
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineKind {
    SlidingWindow,
    TileGrid,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset split.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
        /// Write only the index; images are then rendered from metadata.
        #[arg(long)]
        no_images: bool,
    },
    /// Fit the area-ratio prior on a dataset of ordinarily sized objects.
    FitPrior {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attach a ground-truth search process to every sample.
    Extend {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        prior: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train the backbone or fine-tune a localizer.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        stage: Stage,
        /// Proxy dataset for pre-training, otherwise the dataset the
        /// extended file was built from.
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        extended: Option<PathBuf>,
        #[arg(long)]
        backbone: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a trained localizer on a dataset and write per-sample results.
    Infer {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "piza")]
        method: InferMethod,
        /// Step count for `--method fixed`.
        #[arg(long, default_value_t = 1)]
        steps: usize,
    },
    /// Run the sliding-window or tile-grid baseline.
    Baseline {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        kind: BaselineKind,
    },
    /// Score one results file.
    Eval {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        gts: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score several results files on the same samples into one table.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        results: Vec<PathBuf>,
        #[arg(long)]
        gts: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the whole pipeline from one config.
    Experiment {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn load_config(path: Option<&Path>) -> piza::Result<RunConfig> {
    match path {
        Some(p) => {
            if !p.exists() {
                return Err(Error::io(p, std::io::ErrorKind::NotFound.into()));
            }
            RunConfig::load(p)
        }
        None => Ok(RunConfig::default()),
    }
}

/// Decodes PNGs when the dataset has them, otherwise renders from metadata.
fn images_for(dir: &Path, samples: &[SynthSample]) -> ImageSource {
    let root = if dir.is_dir() { dir } else { dir.parent().unwrap_or(Path::new(".")) };
    match samples.first() {
        Some(s) if root.join(&s.image).exists() => ImageSource::Directory(root.to_path_buf()),
        _ => ImageSource::render(samples),
    }
}

fn load_results(path: &Path) -> piza::Result<(String, Vec<ResultRecord>)> {
    let results: Vec<ResultRecord> = read_jsonl(path)?;
    let method = results
        .first()
        .map(|r| r.method.clone())
        .ok_or(Error::Empty("results"))?;
    Ok((method, results))
}

fn run(command: Command) -> piza::Result<()> {
    match command {
        Command::Synth {
            config,
            out,
            split,
            no_images,
        } => {
            let cfg = load_config(config.as_deref())?;
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Test => Split::Test,
                SplitArg::Proxy => Split::Proxy,
            };
            let samples = synth_split(&cfg, split)?;
            let index = write_dataset(&out, &samples, !no_images)?;
            eprintln!("{} samples -> {}", samples.len(), index.display());
        }
        Command::FitPrior { config, dataset, out } => {
            let cfg = load_config(config.as_deref())?;
            let samples = read_dataset(&dataset)?;
            let prior = fit_prior(&cfg, &samples)?;
            prior.save(&out)?;
            eprintln!(
                "prior from {} ratios, bandwidth {:.3e} -> {}",
                prior.samples().len(),
                prior.bandwidth(),
                out.display()
            );
        }
        Command::Extend {
            config,
            dataset,
            prior,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let samples = read_dataset(&dataset)?;
            let prior = RatioDistribution::load(&prior)?;
            let ext = extend(&samples, &prior, &cfg.gen()?)?;
            write_jsonl(&out, &ext)?;
            let mean = ext.iter().map(|e| e.process.steps() as f64).sum::<f64>() / ext.len().max(1) as f64;
            eprintln!("{} processes, mean steps {mean:.3} -> {}", ext.len(), out.display());
        }
        Command::Train {
            config,
            stage,
            dataset,
            extended,
            backbone,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let samples = read_dataset(&dataset)?;
            let (model, log) = match stage {
                Stage::Pretrain => pretrain_backbone(&cfg, &samples)?,
                Stage::SingleShot | Stage::Piza => {
                    let ext_path = extended.ok_or_else(|| Error::Config("--extended is required".into()))?;
                    let bb_path = backbone.ok_or_else(|| Error::Config("--backbone is required".into()))?;
                    let ext: Vec<ExtendedSample> = read_jsonl(&ext_path)?;
                    let bb = ToyModel::load(&bb_path)?;
                    let images = images_for(&dataset, &samples);
                    train_localizer(&cfg, &bb, &ext, &images, matches!(stage, Stage::Piza))?
                }
            };
            model.save(&out)?;
            let log_path = out.with_extension("log.csv");
            write_log_csv(&log_path, &log)?;
            eprintln!("{} steps -> {} (log {})", log.len(), out.display(), log_path.display());
        }
        Command::Infer {
            config,
            model,
            dataset,
            out,
            method,
            steps,
        } => {
            let cfg = load_config(config.as_deref())?;
            let model = ToyModel::load(&model)?;
            let samples = read_dataset(&dataset)?;
            let method = match method {
                InferMethod::Piza => Method::Piza,
                InferMethod::Fixed => Method::Fixed(steps),
                InferMethod::SingleShot => Method::SingleShot,
            };
            let results = run_method(&model, method, &samples, &images_for(&dataset, &samples), cfg.infer())?;
            write_jsonl(&out, &results)?;
            eprintln!("{} results ({method}) -> {}", results.len(), out.display());
        }
        Command::Baseline {
            config,
            model,
            dataset,
            out,
            kind,
        } => {
            let cfg = load_config(config.as_deref())?;
            let model = ToyModel::load(&model)?;
            let samples = read_dataset(&dataset)?;
            let method = match kind {
                BaselineKind::SlidingWindow => Method::SlidingWindow(cfg.window()?),
                BaselineKind::TileGrid => Method::TileGrid(cfg.tile_grid),
            };
            let results = run_method(&model, method, &samples, &images_for(&dataset, &samples), cfg.infer())?;
            write_jsonl(&out, &results)?;
            eprintln!("{} results ({method}) -> {}", results.len(), out.display());
        }
        Command::Eval { results, gts, out } => {
            let gts = read_dataset(&gts)?;
            let (method, results) = load_results(&results)?;
            let report = evaluate(&method, &results, &gts)?;
            write_report(&out, std::slice::from_ref(&report))?;
            print!("{}", report_csv(std::slice::from_ref(&report))?);
        }
        Command::Report { results, gts, out } => {
            let gts = read_dataset(&gts)?;
            let reports = results
                .iter()
                .map(|p| {
                    let (method, r) = load_results(p)?;
                    evaluate(&method, &r, &gts)
                })
                .collect::<piza::Result<Vec<_>>>()?;
            compare_report(&reports)?;
            write_report(&out, &reports)?;
            print!("{}", report_csv(&reports)?);
        }
        Command::Experiment { config, out } => {
            let cfg = load_config(config.as_deref())?;
            let output = run_experiment(&cfg, Some(&out), &mut |line| eprintln!("{line}"))?;
            print!("{}", report_csv(&output.reports)?);
        }
    }
    Ok(())
}
