use clap::{Args, Parser, Subcommand};
use neurovid::config::PipelineConfig;
use neurovid::pipeline::commands::{demo_lines, run, Command};
use neurovid::pipeline::PipelineError;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "neurovid", version, about = "fMRI-to-video decoding pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct Common {
    /// JSON pipeline config; absent keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for every random draw of the run.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset with planted structure.
    Synth(Common),
    /// Z-transform, average and shift fMRI runs and pair them with video windows.
    Preprocess(Common),
    /// Fit a flow codebook.
    FitCodebook(Common),
    /// Train the motion decoder and its image-only ablation.
    TrainMotion(Common),
    /// Matching ratio, SSIM and N-way accuracy from score files.
    EvalImage(Common),
    /// Coverage-bucketed masked cosine table.
    EvalMotion(Common),
    /// Differential encoding report and maps.
    Encode(Common),
    /// Full synthetic end-to-end run.
    Demo(Common),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, common) = match cli.command {
        Cmd::Synth(c) => (Command::Synth, c),
        Cmd::Preprocess(c) => (Command::Preprocess, c),
        Cmd::FitCodebook(c) => (Command::FitCodebook, c),
        Cmd::TrainMotion(c) => (Command::TrainMotion, c),
        Cmd::EvalImage(c) => (Command::EvalImage, c),
        Cmd::EvalMotion(c) => (Command::EvalMotion, c),
        Cmd::Encode(c) => (Command::Encode, c),
        Cmd::Demo(c) => (Command::Demo, c),
    };
    let result = PipelineConfig::load(common.config.as_deref())
        .map_err(PipelineError::from)
        .and_then(|cfg| run(command, &cfg, common.seed, &common.out));
    match result {
        Ok(summary) => {
            if command == Command::Demo {
                for line in demo_lines(&summary) {
                    println!("{line}");
                }
            } else {
                println!("{}", serde_json::to_string_pretty(&summary).expect("summary"));
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
