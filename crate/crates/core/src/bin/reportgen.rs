use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use reportgen::commands::{self, resolve_config, SweepAxis};
use reportgen::Result;

#[derive(Parser)]
#[command(
    name = "reportgen",
    about = "Structured report generation: data, training, decoding, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write train/val/test JSONL splits and the vocabulary.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        force: bool,
    },
    /// Section-aware supervised pretraining.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// PPO fine-tuning from a pretraining checkpoint.
    PpoTrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Generate one report with forcing and best-of-N.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        study: String,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long = "t-find")]
        t_find: Option<f64>,
        #[arg(long = "t-imp")]
        t_imp: Option<f64>,
        #[arg(long)]
        p: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Generate for a whole split and write metric CSVs.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Forcing-length or temperature sweep.
    Sweep {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// SL / +RL / +FG / +BoN grid.
    Ablate {
        #[arg(long)]
        sl: PathBuf,
        #[arg(long)]
        rl: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn data_or_config(data: Option<PathBuf>, cfg: &reportgen::config::RunConfig) -> Result<PathBuf> {
    data.or_else(|| cfg.data.clone()).ok_or_else(|| {
        reportgen::Error::Usage("no data directory: pass --data or set `data` in the config".into())
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData {
            config,
            out,
            seed,
            force,
        } => {
            let mut cfg = resolve_config(config.as_deref(), None)?;
            if let Some(s) = seed {
                cfg.corpus.seed = s;
            }
            commands::gen_data(&cfg, &out, force)
        }
        Cmd::Pretrain {
            config,
            data,
            out,
            force,
        } => {
            let cfg = resolve_config(config.as_deref(), None)?;
            commands::pretrain(&cfg, data.as_deref(), &out, force)
        }
        Cmd::PpoTrain {
            config,
            init,
            out,
            force,
        } => {
            let cfg = resolve_config(config.as_deref(), init.as_deref())?;
            commands::ppo_train(&cfg, init.as_deref(), &out, force)
        }
        Cmd::Generate {
            checkpoint,
            study,
            data,
            config,
            k,
            n,
            t_find,
            t_imp,
            p,
            seed,
        } => {
            let cfg = resolve_config(config.as_deref(), Some(&checkpoint))?;
            let mut d = cfg.decode.clone();
            d.k = k.unwrap_or(d.k);
            d.n = n.unwrap_or(d.n);
            d.t_find = t_find.unwrap_or(d.t_find);
            d.t_imp = t_imp.unwrap_or(d.t_imp);
            d.top_p = p.unwrap_or(d.top_p);
            d.seed = seed.unwrap_or(d.seed);
            let data = data_or_config(data, &cfg)?;
            print!("{}", commands::generate(&checkpoint, &data, &study, &d)?);
            Ok(())
        }
        Cmd::Evaluate {
            checkpoint,
            data,
            config,
            split,
            out,
        } => {
            let cfg = resolve_config(config.as_deref(), Some(&checkpoint))?;
            let data = data_or_config(data, &cfg)?;
            let out = out.unwrap_or_else(|| checkpoint.join("eval"));
            print!(
                "{}",
                commands::evaluate(&checkpoint, &data, &split, &cfg, &out)?
            );
            Ok(())
        }
        Cmd::Sweep {
            checkpoint,
            axis,
            values,
            data,
            config,
            split,
            out,
        } => {
            let axis = SweepAxis::parse(&axis, &values)?;
            let cfg = resolve_config(config.as_deref(), Some(&checkpoint))?;
            let data = data_or_config(data, &cfg)?;
            let out = out.unwrap_or_else(|| checkpoint.join("sweep"));
            print!(
                "{}",
                commands::sweep(&checkpoint, &data, &split, &axis, &cfg, &out)?
            );
            Ok(())
        }
        Cmd::Ablate {
            sl,
            rl,
            data,
            config,
            split,
            out,
        } => {
            let cfg = resolve_config(config.as_deref(), Some(&rl))?;
            let data = data_or_config(data, &cfg)?;
            let out = out.unwrap_or_else(|| rl.join("ablation"));
            print!(
                "{}",
                commands::ablation(&sl, &rl, &data, &split, &cfg, &out)?
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
