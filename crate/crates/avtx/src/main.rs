//! `avtx` command line: profile, train, evaluate, fine-tune and generate
//! synthetic data.
//!
//! Failures print one JSON record `{"error": kind, "message": text}` on
//! stderr and exit with 2 for usage errors and 1 otherwise.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use avtx::config::{parse_front_end, parse_preset, Overrides, RunConfig};
use avtx::profile::{profile, ProfileRequest, DEFAULT_RUNS};
use avtx::run::{cmd_eval, cmd_features, cmd_finetune, cmd_gen_data, cmd_train};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "avtx", version, about = "Audio-visual speech recognition toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Run configuration file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model preset: desk or paper.
    #[arg(long)]
    preset: Option<String>,
    /// Video front-end: vgg21d, vit or audio-only.
    #[arg(long = "front-end")]
    front_end: Option<String>,
    /// Seed for initialization and training.
    #[arg(long)]
    seed: Option<u64>,
}

impl RunArgs {
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let o = Overrides {
            preset: self.preset.clone(),
            front_end: self.front_end.clone(),
            seed: self.seed,
        };
        Ok(o.resolve(self.config.as_deref())?)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Front-end GFLOPs, parameters and forward latency.
    Profile {
        #[arg(long, default_value = "desk")]
        preset: String,
        /// Front-ends to profile (default: vgg21d and vit).
        #[arg(long = "front-end")]
        front_end: Vec<String>,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long, default_value_t = 32)]
        steps: usize,
        /// Timed forward passes after the warm-up; 0 skips timing.
        #[arg(long, default_value_t = DEFAULT_RUNS)]
        runs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for profile.txt and profile.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train on the synthetic task.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// WER grid of one or more checkpoints.
    Eval {
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        /// Directory for eval.txt and eval.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fine-tune a checkpoint on a mix of its task and a second task.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Replaces the configuration stored in the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "runs/finetune")]
        out: PathBuf,
    },
    /// Write the synthetic task as WAV, video and transcript files.
    GenData {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
    /// Stacked log-mel features of a WAV file.
    Features {
        #[arg(long)]
        wav: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn write_reports(dir: &Path, stem: &str, text: &str, csv: &str) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for (ext, body) in [("txt", text), ("csv", csv)] {
        let p = dir.join(format!("{stem}.{ext}"));
        std::fs::write(&p, body).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Cmd::Profile {
            preset,
            front_end,
            batch,
            steps,
            runs,
            seed,
            out,
        } => {
            let mut req = ProfileRequest::new(parse_preset(&preset)?);
            if !front_end.is_empty() {
                req.front_ends = front_end.iter().map(|f| parse_front_end(f)).collect::<Result<_, _>>()?;
            }
            req.batch = batch;
            req.steps = steps;
            req.runs = runs;
            req.seed = seed;
            let rep = profile(&req)?;
            let text = rep.to_text();
            print!("{text}");
            if let Some(dir) = out {
                write_reports(&dir, "profile", &text, &rep.to_csv()?)?;
            }
        }
        Cmd::Train { run, out, resume } => {
            let cfg = run.resolve()?;
            let s = cmd_train(&cfg, &out, resume.as_deref())?;
            println!(
                "trained {} steps, training WER {:.2}%{}, model {}",
                s.steps,
                100.0 * s.final_wer,
                if s.stopped_early { " (target reached)" } else { "" },
                s.model.display()
            );
        }
        Cmd::Eval { checkpoints, out } => {
            let grid = cmd_eval(&checkpoints)?;
            let text = grid.to_text();
            print!("{text}");
            if let Some(dir) = out {
                write_reports(&dir, "eval", &text, &grid.to_csv()?)?;
            }
        }
        Cmd::Finetune { checkpoint, config, out } => {
            let cfg = match config {
                Some(p) => Some(RunConfig::from_kv(&RunConfig::load(&p)?)?),
                None => None,
            };
            let s = cmd_finetune(&checkpoint, cfg.as_ref(), &out)?;
            println!(
                "primary WER {:.2}% -> {:.2}%, fine-tuning task WER {:.2}% -> {:.2}%, model {}",
                100.0 * s.primary_wer.0,
                100.0 * s.primary_wer.1,
                100.0 * s.finetune_wer.0,
                100.0 * s.finetune_wer.1,
                s.model.display()
            );
        }
        Cmd::GenData { run, out } => {
            let cfg = run.resolve()?;
            let n = cmd_gen_data(&cfg, &out)?;
            println!("wrote {n} utterances to {}", out.display());
        }
        Cmd::Features { wav, out } => {
            let [t, d] = cmd_features(&wav, &out)?;
            println!("{t} x {d} features written to {}", out.display());
        }
    }
    Ok(())
}

fn fail(kind: &str, message: String) -> ExitCode {
    let rec = serde_json::json!({ "error": kind, "message": message });
    eprintln!("{rec}");
    ExitCode::from(if kind == "usage" { 2 } else { 1 })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.to_string().trim_end().to_string()),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.downcast_ref::<avtx::Error>().map_or("internal", avtx::Error::kind);
            fail(kind, format!("{e:#}"))
        }
    }
}
