use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use motionseg::config::Config;
use motionseg::metrics::Mode;
use motionseg::model::Model;
use motionseg::pipeline::{self, VideoSequence};
use motionseg::training::{train, write_loss_csv};
use motionseg::Error;

#[derive(Parser)]
#[command(name = "motionseg", version, about = "Train, run and score the motion/appearance segmentation network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on synthetic clips and write a checkpoint.
    Train {
        /// key=value config file; defaults to the toy preset
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
        /// Loss log; defaults to `<out>.loss.csv`
        #[arg(long)]
        log: Option<PathBuf>,
        /// Overrides a config key, e.g. `--set seed=3`
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Segment a frame directory; writes `masks/` and `saliency/` under --out.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        flows: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Frames per clip; defaults to the checkpoint's clip length
        #[arg(long)]
        clip_len: Option<usize>,
    },
    /// Score predictions against ground-truth masks.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, value_parser = ["uvos", "vsod"])]
        mode: String,
        /// CSV report path; a JSON twin is written next to it
        #[arg(long)]
        report: PathBuf,
    },
    /// Render a synthetic video with flows and masks.
    MakeData {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// J&F of one sequence for several clip lengths.
    Sweep {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        flows: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,12,16")]
        t: Vec<usize>,
        /// CSV output; printed to stdout when absent
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> motionseg::Result<Config> {
    let mut cfg = match path {
        Some(p) => Config::load(p)?,
        None => Config::toy(),
    };
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {o:?} is not KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.model.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> motionseg::Result<()> {
    match cli.command {
        Command::Train {
            config,
            steps,
            out,
            log,
            overrides,
        } => {
            let cfg = load_config(config.as_deref(), &overrides)?;
            let every = cfg.train.log_every.max(1);
            let (model, losses) = train(&cfg, steps, |r| {
                if r.step % every == 0 || r.step + 1 == steps {
                    eprintln!("step {:>5}  loss {:.5}  main {:.5}", r.step, r.total, r.main);
                }
            })?;
            model.save(&out)?;
            let log = log.unwrap_or_else(|| {
                let mut s = out.clone().into_os_string();
                s.push(".loss.csv");
                PathBuf::from(s)
            });
            write_loss_csv(&log, &losses)?;
            println!("wrote {} after {steps} steps", out.display());
        }
        Command::Infer {
            ckpt,
            frames,
            flows,
            out,
            clip_len,
        } => {
            let model = Model::load(&ckpt)?;
            let seq = VideoSequence::load(&frames, &flows)?;
            let t = clip_len.unwrap_or(model.config.clip_len);
            let inf = pipeline::infer(&seq, &model, t)?;
            pipeline::write_inference(&out, &seq, &inf)?;
            println!("wrote {} masks to {}", inf.probs.len(), out.display());
        }
        Command::Eval { pred, gt, mode, report } => {
            let mode: Mode = mode.parse()?;
            let r = pipeline::evaluate(&pred, &gt, mode)?;
            r.write(&report)?;
            print!("{}", r.to_csv());
        }
        Command::MakeData { spec, out, overrides } => {
            let cfg = load_config(spec.as_deref(), &overrides)?;
            let n = pipeline::make_data(&cfg, &out)?;
            println!("wrote {n} frames to {}", out.display());
        }
        Command::Sweep {
            ckpt,
            frames,
            flows,
            gt,
            t,
            out,
        } => {
            let model = Model::load(&ckpt)?;
            let seq = VideoSequence::load(&frames, &flows)?.with_gt(&gt)?;
            let csv = pipeline::sweep_csv(&pipeline::sweep_clip_length(&seq, &model, &t)?);
            match out {
                Some(p) => std::fs::write(p, csv)?,
                None => print!("{csv}"),
            }
        }
    }
    Ok(())
}

fn kind(e: &Error) -> &'static str {
    match e {
        Error::Shape(_) => "shape",
        Error::Autograd(_) => "autograd",
        Error::Config(_) => "config",
        Error::Checkpoint(_) => "checkpoint",
        Error::Data(_) => "data",
        Error::Diverged(_) => "diverged",
        Error::Io(_) => "io",
        Error::Image(_) => "image",
        Error::Json(_) => "json",
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace(['\n', '\r'], " ");
            eprintln!("error[{}]: {msg}", kind(&e));
            ExitCode::FAILURE
        }
    }
}
