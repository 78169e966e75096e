use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod bench;
mod commands;
mod config;
mod workspace;

#[derive(Parser, Debug)]
#[command(name = "mmseq", version, about = "Map-matching laboratory: simulate, label, train, infer, evaluate")]
struct Cli {
    /// Flat key = value configuration file; unset keys take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Directory holding every artifact of the run.
    #[arg(long, global = true, default_value = "run")]
    out_dir: PathBuf,

    /// Root seed; overrides the config value.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModelArg {
    Tfm,
    Gru,
}

/// Anything that produces routes for evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SourceArg {
    Tfm,
    Gru,
    /// Nearest segment per GPS point.
    Naive,
    /// The HMM labels themselves.
    Hmm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DecodeArg {
    Greedy,
    Beam,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the lattice road map.
    GenMap,
    /// Simulate ground-truth routes and noisy GPS trajectories.
    Simulate,
    /// Label every trajectory with the HMM matcher.
    MatchHmm,
    /// Split train/validation/test, build vocabularies and fragments.
    Prepare,
    /// Train a model on the prepared fragments.
    Train {
        #[arg(long, value_enum)]
        model: ModelArg,
        /// Continue from the newest epoch checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Predict routes for the test trajectories.
    Infer {
        #[arg(long, value_enum)]
        model: SourceArg,
        #[arg(long, value_enum)]
        decode: Option<DecodeArg>,
        #[arg(long)]
        beam_width: Option<usize>,
    },
    /// Score predictions against the HMM labels.
    Evaluate {
        #[arg(long, value_enum)]
        model: SourceArg,
    },
    /// Write truth, HMM and predicted routes as GeoJSON.
    ExportGeo,
    /// Time training steps and inference against input length.
    Bench,
}

fn run(cli: Cli) -> mmseq::Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => config::RunConfig::parse(&mmseq::io::read_text(p)?)?,
        None => config::RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    if let Command::Infer { decode, beam_width, .. } = &cli.command {
        if let Some(d) = decode {
            cfg.set("decode.mode", if *d == DecodeArg::Beam { "beam" } else { "greedy" })?;
        }
        if let Some(w) = beam_width {
            cfg.set("decode.beam_width", &w.to_string())?;
        }
    }
    cfg.validate()?;
    std::fs::create_dir_all(&cli.out_dir)?;
    let (name, body): (String, Box<dyn FnOnce(&mut workspace::Workspace) -> mmseq::Result<()>>) = match cli.command {
        Command::GenMap => ("gen-map".into(), Box::new(commands::gen_map)),
        Command::Simulate => ("simulate".into(), Box::new(commands::simulate)),
        Command::MatchHmm => ("match-hmm".into(), Box::new(commands::match_hmm)),
        Command::Prepare => ("prepare".into(), Box::new(commands::prepare)),
        Command::Train { model, resume } => {
            (format!("train-{}", commands::model_name(model)), Box::new(move |ws| commands::train(ws, model, resume)))
        }
        Command::Infer { model, .. } => {
            (format!("infer-{}", commands::source_name(model)), Box::new(move |ws| commands::infer(ws, model)))
        }
        Command::Evaluate { model } => {
            (format!("evaluate-{}", commands::source_name(model)), Box::new(move |ws| commands::evaluate(ws, model)))
        }
        Command::ExportGeo => ("export-geo".into(), Box::new(commands::export_geo)),
        Command::Bench => ("bench".into(), Box::new(bench::run)),
    };
    workspace::Workspace::run(&cli.out_dir, &name, cfg, body)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let cat = e.category();
            eprintln!("error ({cat}): {e}");
            ExitCode::from(cat.exit_code() as u8)
        }
    }
}
