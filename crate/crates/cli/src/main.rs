use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bgvae::data::{load_png, save_png, ImageSet};
use bgvae::entropy::Bitstream;
use bgvae::eval::{self, CurveRow, EvalReport};
use bgvae::metrics::{bdrate, RdCurve};
use bgvae::train::{self, DataSource, TrainConfig};
use bgvae::{checkpoint, Error, Result};
use clap::{Parser, Subcommand};

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;

#[derive(Parser)]
#[command(name = "bgvae", version, about = "Variable-rate learned image codec")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a codec from a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory for the checkpoint and metrics.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compress a PNG into a bitstream file.
    Encode {
        input: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        lambda: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decompress a bitstream file into a PNG.
    Decode {
        input: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Encode and decode every PNG in a directory over a lambda sweep.
    Eval {
        dir: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f64>>,
        /// JSON report path. The per-lambda summary is always printed.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Plot RD curves from eval reports (.json) or point files (.csv).
    Rdplot {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Output prefix; writes `<out>.csv` and `<out>.svg`.
        #[arg(long)]
        out: PathBuf,
    },
    /// BD-rate of a test curve against an anchor curve, in percent.
    Bdrate { anchor: PathBuf, test: PathBuf },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_data_error() { EXIT_DATA } else { EXIT_USAGE })
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train { config, out, seed } => cmd_train(&config, &out, seed),
        Command::Encode {
            input,
            checkpoint,
            lambda,
            out,
        } => {
            let codec = checkpoint::load(&checkpoint)?;
            let stream = codec.compress(&load_png(&input)?, lambda)?;
            std::fs::write(&out, stream.to_bytes())?;
            println!("{}: {} bytes, {:.4} bpp", out.display(), stream.to_bytes().len(), stream.bpp());
            Ok(())
        }
        Command::Decode { input, checkpoint, out } => {
            let codec = checkpoint::load(&checkpoint)?;
            let stream = Bitstream::from_bytes(&std::fs::read(&input)?)?;
            save_png(&out, &codec.decompress(&stream)?)
        }
        Command::Eval {
            dir,
            checkpoint,
            lambdas,
            out,
        } => {
            let codec = checkpoint::load(&checkpoint)?;
            let images = ImageSet::from_dir(&dir)?;
            if images.is_empty() {
                return Err(Error::Ingestion {
                    path: dir,
                    reason: "no PNG files".into(),
                });
            }
            let lambdas = lambdas.unwrap_or_else(|| eval::DEFAULT_LAMBDAS.to_vec());
            let report = eval::evaluate(&codec, &images, &lambdas, &checkpoint.display().to_string())?;
            for a in &report.aggregates {
                println!("lambda {:>8}  {:.4} bpp  {:.3} dB", a.lambda, a.mean_bpp, a.mean_psnr);
            }
            if let Some(out) = out {
                report.save(&out)?;
            }
            Ok(())
        }
        Command::Rdplot { inputs, out } => {
            let mut rows = Vec::new();
            for path in &inputs {
                rows.extend(load_curve_rows(path)?);
            }
            for (label, value) in eval::rdplot(&rows, &out)? {
                match value {
                    Ok(v) => println!("{label}: {v:.4}%"),
                    Err(e) => println!("{label}: n/a ({e})"),
                }
            }
            Ok(())
        }
        Command::Bdrate { anchor, test } => {
            let a = single_curve(&anchor)?;
            let t = single_curve(&test)?;
            println!("{:.4}", bdrate(&a, &t)?);
            Ok(())
        }
    }
}

fn cmd_train(config_path: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut config = TrainConfig::from_file(config_path)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    // Relative paths in the config are relative to the config file.
    let base = config_path.parent().unwrap_or(Path::new("."));
    if let DataSource::Dir(dir) = &mut config.data {
        *dir = base.join(&*dir);
    }
    if let Some(t) = &mut config.teacher {
        *t = base.join(&*t);
    }
    let data = config.data.load(true)?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.toml"), config.to_toml()?)?;
    let outcome = train::run(config, &data, Some(out))?;
    if let Some(last) = outcome.history.last() {
        println!(
            "trained {} steps, final total {:.4}; checkpoint in {}",
            outcome.history.len(),
            last.report.total,
            out.join(train::CHECKPOINT_FILE).display()
        );
    }
    Ok(())
}

fn load_curve_rows(path: &Path) -> Result<Vec<CurveRow>> {
    let is_csv = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if is_csv {
        return eval::read_curve_csv(path);
    }
    let report = EvalReport::load(path)?;
    let label = path.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    Ok(eval::curve_rows(label, &report))
}

fn single_curve(path: &Path) -> Result<RdCurve> {
    let series = eval::group_series(&load_curve_rows(path)?);
    match series.as_slice() {
        [(_, points)] => RdCurve::new(points.clone()),
        _ => Err(Error::Ingestion {
            path: path.to_path_buf(),
            reason: format!("expected one RD series, found {}", series.len()),
        }),
    }
}
