use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lgformer::model::Upsample;
use lgformer_cli::config::RunConfig;
use lgformer_cli::dump::{run_dump, DumpInput};
use lgformer_cli::emerge::{run_emerge, Level};
use lgformer_cli::eval::{run_eval, OcclusionOpts};
use lgformer_cli::gen::run_gen;
use lgformer_cli::train::run_train;
use lgformer_cli::{CliError, CliResult};

/// Hierarchical part/object segmentation on synthetic shapes.
#[derive(Parser)]
#[command(name = "lgformer", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset file.
    Gen(GenArgs),
    /// Train a model and write checkpoint, logs and metrics.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Score argmax assignments of one hierarchy level against labels.
    Emerge(EmergeArgs),
    /// Write predictions and association maps for one image.
    Dump(DumpArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Run config; its `data` section is used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output dataset file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    count: usize,
    /// Overrides `data.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Apply the occlusion protocol to every sample.
    #[arg(long)]
    occlude: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training dataset file; generated from the config when absent.
    #[arg(long)]
    train: Option<PathBuf>,
    /// Validation dataset file; generated from the config when absent.
    #[arg(long)]
    val: Option<PathBuf>,
    /// Overrides `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum UpsampleArg {
    Assoc,
    Bilinear,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "assoc")]
    upsample: UpsampleArg,
    /// Also evaluate with an occluder over 20-40% of each object region.
    #[arg(long)]
    occlude: bool,
    /// Seed of the occluder placement.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EmergeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "superpixel")]
    level: Level,
    /// Largest number of units merged per class.
    #[arg(long, default_value_t = 6)]
    topk: usize,
    /// Id maps and overlays are written for this many samples.
    #[arg(long, default_value_t = 4)]
    maps: usize,
    /// Accepted for symmetry with the other commands; the probe has no
    /// randomness.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct DumpArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// RGB input as binary PPM.
    #[arg(long, conflicts_with = "data")]
    image: Option<PathBuf>,
    /// Dataset file to take the sample from.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long)]
    out: PathBuf,
}

fn run(cmd: Cmd) -> CliResult<()> {
    match cmd {
        Cmd::Gen(a) => {
            let mut data = RunConfig::load(a.config.as_deref())?.data;
            data.seed = a.seed.unwrap_or(data.seed);
            data.occlusion |= a.occlude;
            let report = run_gen(&data, a.count, &a.out)?;
            println!("wrote {} samples to {}", report.count, a.out.display());
            print!("{}", report.histogram_table());
        }
        Cmd::Train(a) => {
            let mut cfg = RunConfig::load(a.config.as_deref())?;
            if let Some(p) = a.train {
                cfg.train.train_set = Some(p);
            }
            if let Some(p) = a.val {
                cfg.train.val_set = Some(p);
            }
            if let Some(o) = a.out {
                cfg.out_dir = o;
            }
            cfg.train.seed = a.seed.unwrap_or(cfg.train.seed);
            let out = run_train(&cfg, |line| println!("{line}"))?;
            println!("checkpoint {}", out.checkpoint.display());
            println!("part mIoU {:.4}  object mIoU {:.4}", out.part.miou, out.obj.miou);
        }
        Cmd::Eval(a) => {
            let upsample = match a.upsample {
                UpsampleArg::Assoc => Upsample::Assoc,
                UpsampleArg::Bilinear => Upsample::Bilinear,
            };
            let occ = a.occlude.then_some(OcclusionOpts { seed: a.seed, coverage: [0.2, 0.4] });
            let out = run_eval(&a.checkpoint, &a.data, &a.out, upsample, occ)?;
            for f in &out.files {
                println!("wrote {}", f.display());
            }
            let summary = out.files.last().expect("summary written");
            print!("{}", std::fs::read_to_string(summary)?);
        }
        Cmd::Emerge(a) => {
            let out = run_emerge(&a.checkpoint, &a.data, &a.out, a.level, a.topk, a.maps)?;
            println!("{} units", out.units);
            for (k, m) in out.mean.iter().enumerate() {
                println!("top-{} mean IoU {m:.4}", k + 1);
            }
        }
        Cmd::Dump(a) => {
            let input = match (a.image, a.data) {
                (Some(p), None) => DumpInput::Image(p),
                (None, Some(d)) => DumpInput::Sample { data: d, index: a.index },
                _ => return Err(CliError::Validation("dump needs exactly one of --image or --data".into())),
            };
            for f in run_dump(&a.checkpoint, &input, &a.out)? {
                println!("wrote {}", f.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
