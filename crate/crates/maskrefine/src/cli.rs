//! `maskrefine` subcommands. Exit codes: 0 success, 1 usage or config
//! error, 2 data or model error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use maskrefine_core::features::RoiBox;
use maskrefine_core::model::{forward_refine, TreeSource};
use maskrefine_core::training::{generate_synthetic_dataset, gradient_probe, train, EpochLog};
use maskrefine_core::Config;
use serde::Serialize;

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::dataset::{read_dataset, read_rgb_png, write_dataset};
use crate::error::{Error, Result};
use crate::overlay::render_overlay;
use crate::report::{evaluate_split, render_report};
use crate::settings::load_config;

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "maskrefine", version, about = "Quadtree mask refinement on a synthetic damage dataset")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a seeded synthetic dataset directory.
    GenData(GenDataArgs),
    /// Train on a dataset directory and write the best checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a split and write a metric report.
    Eval(EvalArgs),
    /// Refine one instance and write a coarse/refined overlay.
    Refine(RefineArgs),
    /// Write coarse/refined overlays for a split.
    Viz(VizArgs),
    /// Check analytic gradients of the full model against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Also write the per-epoch log (JSON lines) to this file.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    teacher_forcing_epochs: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Val,
    Test,
}

impl SplitArg {
    fn name(self) -> &'static str {
        match self {
            SplitArg::Val => "val",
            SplitArg::Test => "test",
        }
    }
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, value_enum)]
    split: SplitArg,
    #[arg(long)]
    report: PathBuf,
    /// Skip throughput timing; the report is then fully deterministic.
    #[arg(long)]
    no_fps: bool,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    repeats: Option<usize>,
}

#[derive(Debug, Args)]
struct RefineArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Box as `x0,y0,x1,y1` in image pixels.
    #[arg(long = "box", value_parser = parse_box)]
    bbox: RoiBox,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct VizArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Render at most this many instances.
    #[arg(long, default_value_t = 16)]
    limit: usize,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-3)]
    eps: f32,
}

fn parse_box(s: &str) -> std::result::Result<RoiBox, String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let v: Vec<f32> = parts
        .iter()
        .map(|p| p.parse::<f32>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match v[..] {
        [x0, y0, x1, y1] if v.iter().all(|c| c.is_finite()) && x1 > x0 && y1 > y0 => Ok(RoiBox::new(x0, y0, x1, y1)),
        [_, _, _, _] => Err("box needs x1 > x0 and y1 > y0".into()),
        _ => Err(format!("expected x0,y0,x1,y1, got {} values", v.len())),
    }
}

/// Runs the CLI on `args` (program name first) and returns the exit code.
pub fn run(args: &[String], out: &mut dyn Write, err: &mut dyn Write) -> u8 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(err, "{text}");
                    EXIT_USAGE
                }
            };
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            match e {
                Error::Config(_) | Error::Core(maskrefine_core::Error::Config(_)) => EXIT_USAGE,
                _ => EXIT_DATA,
            }
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::GenData(a) => gen_data(a, out),
        Command::Train(a) => train_cmd(a, out),
        Command::Eval(a) => eval_cmd(a, out),
        Command::Refine(a) => refine_cmd(a, out),
        Command::Viz(a) => viz_cmd(a, out),
        Command::Gradcheck(a) => gradcheck_cmd(a, out),
    }
}

fn config_or_default(path: Option<&Path>) -> Result<Config> {
    path.map_or_else(|| Ok(Config::default()), load_config)
}

fn say(out: &mut dyn Write, line: impl std::fmt::Display) -> Result<()> {
    writeln!(out, "{line}").map_err(|e| Error::io("<stdout>", e))
}

fn gen_data(a: GenDataArgs, out: &mut dyn Write) -> Result<()> {
    let mut config = config_or_default(a.config.as_deref())?;
    if let Some(n) = a.n {
        config.data.samples = n;
    }
    if let Some(s) = a.image_size {
        config.data.image_size = s;
    }
    let split = generate_synthetic_dataset(config.data.samples, a.seed, config.data.image_size)?;
    write_dataset(&a.out, &split)?;
    say(
        out,
        format_args!(
            "wrote {} samples ({} train, {} val, {} test) to {}",
            split.len(),
            split.train.len(),
            split.val.len(),
            split.test.len(),
            a.out.display()
        ),
    )
}

/// Final line of the training log.
#[derive(Debug, Serialize)]
struct TrainSummary {
    best_epoch: Option<usize>,
    val_refined_iou: f64,
}

fn train_cmd(a: TrainArgs, out: &mut dyn Write) -> Result<()> {
    let mut config = config_or_default(a.config.as_deref())?;
    let t = &mut config.training;
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.seed {
        t.seed = v;
    }
    if let Some(v) = a.lr {
        t.lr = v;
    }
    if let Some(v) = a.batch {
        t.batch = v;
    }
    if let Some(v) = a.teacher_forcing_epochs {
        t.teacher_forcing_epochs = v;
    }
    config.validate().map_err(|e| Error::Config(e.to_string()))?;
    let split = read_dataset(&a.data)?;

    let mut lines = Vec::new();
    let mut io_err = None;
    let outcome = train(&split, &config, &mut |e: &EpochLog| {
        let line = serde_json::to_string(e).expect("epoch log serializes");
        if let Err(err) = writeln!(out, "{line}") {
            io_err.get_or_insert(err);
        }
        lines.push(line);
    })?;
    if let Some(e) = io_err {
        return Err(Error::io("<stdout>", e));
    }
    let summary = serde_json::to_string(&TrainSummary { best_epoch: outcome.best_epoch, val_refined_iou: outcome.best_val_iou })
        .expect("summary serializes");
    say(out, &summary)?;
    lines.push(summary);
    if let Some(path) = &a.log {
        let mut text = lines.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))?;
    }
    let ckpt = Checkpoint { config, params: outcome.params, epoch: outcome.best_epoch, best_val_iou: outcome.best_val_iou };
    save_checkpoint(&ckpt, &a.out)
}

fn eval_cmd(a: EvalArgs, out: &mut dyn Write) -> Result<()> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let split = read_dataset(&a.data)?;
    let samples = split.get(a.split.name())?;
    let timing = (!a.no_fps).then(|| {
        (a.warmup.unwrap_or(ckpt.config.eval.warmup), a.repeats.unwrap_or(ckpt.config.eval.repeats).max(1))
    });
    let report = evaluate_split(&ckpt.params, a.split.name(), samples, timing)?;
    let text = render_report(&report);
    fs::write(&a.report, &text).map_err(|e| Error::io(&a.report, e))?;
    write!(out, "{text}").map_err(|e| Error::io("<stdout>", e))
}

fn refine_cmd(a: RefineArgs, out: &mut dyn Write) -> Result<()> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let image = read_rgb_png(&a.image)?;
    let result = forward_refine(&ckpt.params, &image, &a.bbox, TreeSource::Predicted)?;
    let png = render_overlay(&image, &result.coarse, &result.refined, &a.bbox)?;
    fs::write(&a.out, png).map_err(|e| Error::io(&a.out, e))?;
    say(out, format_args!("{} quadtree nodes; overlay written to {}", result.tree.len(), a.out.display()))
}

fn viz_cmd(a: VizArgs, out: &mut dyn Write) -> Result<()> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let split = read_dataset(&a.data)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let samples = split.get(a.split.name())?;
    for s in samples.iter().take(a.limit) {
        let r = forward_refine(&ckpt.params, &s.image, &s.bbox, TreeSource::Predicted)?;
        let path = a.out.join(format!("{:06}.png", s.id));
        let png = render_overlay(&s.image, &r.coarse, &r.refined, &s.bbox)?;
        fs::write(&path, png).map_err(|e| Error::io(&path, e))?;
    }
    say(out, format_args!("wrote {} overlays to {}", samples.len().min(a.limit), a.out.display()))
}

/// Tolerance on the finite-difference comparison.
pub const GRADCHECK_TOLERANCE: f64 = 1e-3;

fn gradcheck_cmd(a: GradcheckArgs, out: &mut dyn Write) -> Result<()> {
    let r = gradient_probe(a.eps)?;
    say(out, format_args!("entries checked: {}", r.checked))?;
    say(out, format_args!("max relative error, all entries: {:.3e} at {:?}", r.max_rel_error, r.worst))?;
    say(
        out,
        format_args!(
            "max relative error, {} entries on one smooth piece: {:.3e} at {:?}",
            r.checked - r.kinked,
            r.max_rel_error_smooth,
            r.worst_smooth
        ),
    )?;
    say(out, format_args!("entries whose stencil crosses a kink: {}", r.kinked))?;
    if r.max_rel_error_smooth < GRADCHECK_TOLERANCE {
        say(out, "gradcheck passed")
    } else {
        Err(Error::Data(format!(
            "gradcheck failed: {:.3e} exceeds {GRADCHECK_TOLERANCE:e}",
            r.max_rel_error_smooth
        )))
    }
}
