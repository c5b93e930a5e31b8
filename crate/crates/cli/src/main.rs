//! `beat`: synthesize, ingest and preprocess ECG records, train the
//! tokenizer, evaluate it and convert segments to and from token text.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use settings::{CommonArgs, ModelArgs, PrepArgs, Settings, TrainArgs, UsageError};

#[derive(Parser, Debug)]
#[command(name = "beat", version, about = "Dual-codebook ECG tokenizer", arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct ConfigArg {
    /// key=value file; flags given on the command line win
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
}

macro_rules! io_group {
    ($name:ident { $($field:ident : $ty:ty = $key:literal, $help:literal;)* }) => {
        #[derive(Args, Debug, Clone, Default)]
        struct $name {
            $(
                #[arg(long = $key, help = $help)]
                $field: Option<$ty>,
            )*
        }

        impl $name {
            const KEYS: &'static [&'static str] = &[$($key),*];

            fn pairs(&self) -> Vec<(&'static str, Option<String>)> {
                vec![$(($key, self.$field.as_ref().map(|v| v.to_string()))),*]
            }
        }
    };
}

io_group!(SynthIo {
    out_dir: String = "out-dir", "Directory for the generated WFDB records";
    count: usize = "count", "Number of records";
    leads: usize = "leads", "Leads per record";
    fs: f64 = "fs", "Sampling rate in Hz";
    duration: f64 = "duration", "Record length in seconds";
    heart_rate: f64 = "heart-rate", "Mean heart rate in beats per minute";
    noise_std: f64 = "noise-std", "Mean standard deviation of additive noise";
});

io_group!(IngestIo {
    input: String = "in", "WFDB header (.hea) or CSV record";
    out: String = "out", "CSV output in physical units";
    fs: f64 = "fs", "Sampling rate of a CSV input";
});

io_group!(PreprocessIo {
    input: String = "in", "Record file (.hea or .csv) or a directory of them";
    out_dir: String = "out-dir", "Directory for <name>.bseg and <name>.future.bseg";
    fs: f64 = "fs", "Sampling rate of CSV inputs";
});

io_group!(TrainIo {
    data: String = "data", "Directory of preprocessed pairs";
    eval_data: String = "eval-data", "Directory of held-out pairs";
    synth: usize = "synth", "Train on this many synthetic pairs instead of --data";
    eval_synth: usize = "eval-synth", "Synthetic held-out pairs (default 64)";
    out: String = "out", "Checkpoint path";
    history: String = "history", "Per-epoch CSV path";
});

io_group!(EvalIo {
    ckpt: String = "ckpt", "Checkpoint path";
    data: String = "data", "Directory of pairs to evaluate";
    synth: usize = "synth", "Evaluate on this many synthetic pairs instead";
    baseline_r: f64 = "baseline-r", "Baseline reconstruction loss for the score";
    baseline_p: f64 = "baseline-p", "Baseline prediction loss for the score";
});

io_group!(EncodeIo {
    ckpt: String = "ckpt", "Checkpoint path";
    input: String = "in", "Context segment (.bseg)";
    out: String = "out", "Write the token line here instead of stdout";
});

io_group!(DecodeIo {
    ckpt: String = "ckpt", "Checkpoint path";
    tokens: String = "tokens", "File holding one token line";
    out: String = "out", "Reconstructed segment (.bseg)";
});

io_group!(AblateIo {
    n_train: usize = "n-train", "Synthetic training pairs per configuration";
    n_eval: usize = "n-eval", "Synthetic held-out pairs per configuration";
    out: String = "out", "Ablation CSV path";
});

#[derive(Subcommand, Debug)]
enum Command {
    /// Write jittered synthetic recordings as WFDB records
    Synth {
        #[command(flatten)]
        io: SynthIo,
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Read a WFDB or CSV record and write it as CSV
    Ingest {
        #[command(flatten)]
        io: IngestIo,
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Resample, clean, window and normalize records into segment pairs
    Preprocess {
        #[command(flatten)]
        io: PreprocessIo,
        #[command(flatten)]
        prep: PrepArgs,
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Train a tokenizer and write a checkpoint
    Train {
        #[command(flatten)]
        io: TrainIo,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Reconstruction and prediction loss, utilization and score
    Eval {
        #[command(flatten)]
        io: EvalIo,
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Print the token line of a segment
    Encode {
        #[command(flatten)]
        io: EncodeIo,
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Reconstruct a segment from a token line
    Decode {
        #[command(flatten)]
        io: DecodeIo,
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Train the base configuration and the standard variants, write a CSV
    Ablate {
        #[command(flatten)]
        io: AblateIo,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        config: ConfigArg,
    },
}

fn settings(
    config: &ConfigArg,
    groups: &[(&[&'static str], Vec<(&'static str, Option<String>)>)],
) -> anyhow::Result<Settings> {
    let allowed: Vec<&str> = groups.iter().flat_map(|(k, _)| k.iter().copied()).collect();
    let flags = groups.iter().flat_map(|(_, p)| p.iter().cloned()).collect();
    Settings::merge(&allowed, config.config.as_deref(), flags)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let common_keys = CommonArgs::KEYS;
    match cli.command {
        Command::Synth { io, common, config } => {
            let s = settings(&config, &[(SynthIo::KEYS, io.pairs()), (common_keys, common.pairs())])?;
            commands::synth(&s)
        }
        Command::Ingest { io, common, config } => {
            let s = settings(&config, &[(IngestIo::KEYS, io.pairs()), (common_keys, common.pairs())])?;
            commands::ingest(&s)
        }
        Command::Preprocess {
            io,
            prep,
            common,
            config,
        } => {
            let s = settings(
                &config,
                &[
                    (PreprocessIo::KEYS, io.pairs()),
                    (PrepArgs::KEYS, prep.pairs()),
                    (common_keys, common.pairs()),
                ],
            )?;
            commands::preprocess(&s)
        }
        Command::Train {
            io,
            model,
            train,
            common,
            config,
        } => {
            let s = settings(
                &config,
                &[
                    (TrainIo::KEYS, io.pairs()),
                    (ModelArgs::KEYS, model.pairs()),
                    (TrainArgs::KEYS, train.pairs()),
                    (common_keys, common.pairs()),
                ],
            )?;
            commands::train(&s)
        }
        Command::Eval { io, common, config } => {
            let s = settings(&config, &[(EvalIo::KEYS, io.pairs()), (common_keys, common.pairs())])?;
            commands::eval(&s)
        }
        Command::Encode { io, common, config } => {
            let s = settings(&config, &[(EncodeIo::KEYS, io.pairs()), (common_keys, common.pairs())])?;
            commands::encode(&s)
        }
        Command::Decode { io, common, config } => {
            let s = settings(&config, &[(DecodeIo::KEYS, io.pairs()), (common_keys, common.pairs())])?;
            commands::decode(&s)
        }
        Command::Ablate {
            io,
            model,
            train,
            common,
            config,
        } => {
            let s = settings(
                &config,
                &[
                    (AblateIo::KEYS, io.pairs()),
                    (ModelArgs::KEYS, model.pairs()),
                    (TrainArgs::KEYS, train.pairs()),
                    (common_keys, common.pairs()),
                ],
            )?;
            commands::ablate(&s)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<UsageError>().is_some() => {
            eprintln!("error: {e}");
            eprintln!("run `beat --help` for usage");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
