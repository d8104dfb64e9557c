use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gesturegen::config::ExperimentConfig;
use gesturegen::pipeline::{
    self, evaluate, infer_dataset, load_clips, load_generator, load_stage2, train_stage1,
    train_stage2, write_report, RunManifest, Stage1Options, Stage2Options, STAGE1_CHECKPOINT,
    STAGE1_LOG, STAGE2_CHECKPOINT, STAGE2_LOG,
};
use gesturegen::Error;

const EXIT_VALIDATION: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_OTHER: u8 = 1;

const REPORT_FILE: &str = "eval_report.csv";

#[derive(Parser, Debug)]
#[command(
    name = "gesturegen",
    version,
    about = "Desk-scale co-speech gesture video generation"
)]
struct Cli {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Overrides the config seed.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Writes synthetic clips to the output directory.
    GenData,
    /// Trains the stage-1 animation model.
    TrainStage1(TrainArgs),
    /// Trains the stage-2 motion diffusion model.
    TrainStage2(Stage2Args),
    /// Generates clips driven by the audio of each input clip.
    Infer(InferArgs),
    /// Compares generated clips against references.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Clip directory; falls back to `data.train_dir`.
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Args, Debug)]
struct Stage2Args {
    #[command(flatten)]
    train: TrainArgs,
    /// Stage-1 checkpoint; defaults to `<out>/stage1.ckpt`.
    #[arg(long, value_name = "PATH")]
    stage1: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InferArgs {
    /// Clips supplying the source frame and audio.
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    stage1: PathBuf,
    #[arg(long, value_name = "PATH")]
    stage2: PathBuf,
    /// Frames per clip; defaults to the clip length.
    #[arg(long)]
    length: Option<usize>,
    /// Also write mean deviation maps as grayscale PNGs.
    #[arg(long)]
    dump_deviation: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long, value_name = "DIR")]
    generated: PathBuf,
    #[arg(long, value_name = "DIR")]
    reference: PathBuf,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Validation(_) => EXIT_VALIDATION,
        Error::Data(_) | Error::Parse { .. } | Error::Io { .. } | Error::Checkpoint { .. } => {
            EXIT_DATA
        }
        _ => EXIT_OTHER,
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &cli.config {
        Some(p) if !p.is_file() => {
            return Err(Error::Validation(vec![format!(
                "config file {} not found",
                p.display()
            )]));
        }
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn data_dir(cfg: &ExperimentConfig, arg: &Option<PathBuf>) -> Result<PathBuf, Error> {
    cfg.validate_paths()?;
    arg.clone()
        .or_else(|| cfg.data.train_dir.clone())
        .ok_or_else(|| Error::Data("no clip directory given (--data or data.train_dir)".into()))
}

fn run(cli: &Cli) -> Result<(), Error> {
    let cfg = load_config(cli)?;
    let out = &cli.out;
    match &cli.command {
        Command::GenData => {
            RunManifest::new("gen-data", &cfg, Vec::new(), None).write(out)?;
            let dirs = pipeline::generate_data(&cfg, out)?;
            println!("wrote {} clips to {}", dirs.len(), out.display());
        }
        Command::TrainStage1(args) => {
            let clips = load_clips(&data_dir(&cfg, &args.data)?)?;
            manifest("train-stage1", &cfg, out, &[STAGE1_CHECKPOINT], STAGE1_LOG)?;
            let opts = Stage1Options {
                resume: args.resume,
                stop_after: None,
            };
            let res = train_stage1(&cfg, &clips, out, &opts)?;
            if let Some(last) = res.rows.last() {
                println!(
                    "stage 1: step {} total {:.5} psnr {:.2}",
                    last.step, last.total, last.psnr
                );
            }
            println!("checkpoint {}", res.checkpoint.display());
        }
        Command::TrainStage2(args) => {
            let clips = load_clips(&data_dir(&cfg, &args.train.data)?)?;
            let s1 = args
                .stage1
                .clone()
                .unwrap_or_else(|| out.join(STAGE1_CHECKPOINT));
            let gen = load_generator(&cfg, &s1)?;
            manifest("train-stage2", &cfg, out, &[STAGE2_CHECKPOINT], STAGE2_LOG)?;
            let opts = Stage2Options {
                resume: args.train.resume,
                stop_after: None,
            };
            let res = train_stage2(&cfg, &gen, &clips, out, &opts)?;
            if let Some(last) = res.rows.last() {
                println!("stage 2: step {} total {:.5}", last.step, last.total);
            }
            println!("checkpoint {}", res.checkpoint.display());
        }
        Command::Infer(args) => {
            let model = load_stage2(&cfg, &args.stage1, &args.stage2)?;
            let clips = load_clips(&data_dir(&cfg, &args.data)?)?;
            RunManifest::new(
                "infer",
                &cfg,
                vec![args.stage1.clone(), args.stage2.clone()],
                None,
            )
            .write(out)?;
            let dirs = infer_dataset(
                &cfg,
                &model,
                &clips,
                out,
                cfg.seed,
                args.length,
                args.dump_deviation,
            )?;
            println!("wrote {} generated clips to {}", dirs.len(), out.display());
        }
        Command::Eval(args) => {
            RunManifest::new("eval", &cfg, Vec::new(), None).write(out)?;
            let report = evaluate(&cfg, &args.generated, &args.reference)?;
            let path = out.join(REPORT_FILE);
            write_report(&report, &path)?;
            print!("{}", report.to_csv());
        }
    }
    Ok(())
}

fn manifest(
    command: &str,
    cfg: &ExperimentConfig,
    out: &Path,
    ckpts: &[&str],
    log: &str,
) -> Result<(), Error> {
    let ckpts = ckpts.iter().map(|c| out.join(c)).collect();
    RunManifest::new(command, cfg, ckpts, Some(out.join(log))).write(out)?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
