use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use betadet_core::betax::{self, BetaParams, Maturity, EPS};
use betadet_core::checkpoint::Checkpoint;
use betadet_core::config::RunConfig;
use betadet_core::evalkit;
use betadet_core::gradcheck::{self, Fault};
use betadet_core::model::{Detection, Model};
use betadet_core::synthdata::{self, fmt_sig9, Image, Scene};
use betadet_core::train::{self, LOSS_LOG_HEADER};
use betadet_core::Error;
use clap::{Parser, Subcommand};

/// Toy query-based detector with a Beta maturity head.
#[derive(Parser)]
#[command(name = "betadet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write `checkpoint.bin` and `loss_log.csv` into `--out`.
    Train {
        /// Run configuration; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Training dataset; overrides `train_data` from the config.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Evaluation dataset; falls back to `eval_data` from the checkpoint's config.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Report CSV path.
        #[arg(long, default_value = "report.csv")]
        out: PathBuf,
    },
    /// Write final-layer detections as CSV.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Minimum objectness; defaults to the checkpoint's `obj_threshold`.
        #[arg(long)]
        min_score: Option<f64>,
    },
    /// Tabulate a Beta density.
    PlotBeta {
        #[arg(long)]
        alpha: f64,
        #[arg(long)]
        beta: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of the full training loss.
    Gradcheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, hide = true)]
        corrupt: bool,
    },
}

const USAGE: u8 = 2;
const DIVERGED: u8 = 3;
const VERIFY: u8 = 4;

struct Failure {
    code: u8,
    err: anyhow::Error,
}

type CmdResult = Result<(), Failure>;

fn fail(code: u8) -> impl FnOnce(anyhow::Error) -> Failure {
    move |err| Failure { code, err }
}

fn usage(err: impl Into<anyhow::Error>) -> Failure {
    Failure { code: USAGE, err: err.into() }
}

fn core(err: Error) -> Failure {
    let code = if matches!(err, Error::Numeric { .. }) { DIVERGED } else { USAGE };
    Failure { code, err: err.into() }
}

fn write_file(path: &Path, contents: &[u8]) -> CmdResult {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display())).map_err(fail(USAGE))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display())).map_err(fail(USAGE))
}

fn load_dataset(dir: &Path) -> Result<Vec<Scene>, Failure> {
    if !dir.is_dir() {
        return Err(usage(anyhow!("dataset directory {} does not exist", dir.display())));
    }
    synthdata::read_dataset(dir).map_err(core)
}

fn cmd_gen(seed: u64, count: usize, out: &Path) -> CmdResult {
    if count == 0 {
        return Err(usage(anyhow!("--count must be at least 1")));
    }
    let scenes = synthdata::generate(seed, count).map_err(core)?;
    synthdata::write_dataset(&scenes, out).map_err(core)?;
    let mut stages = [0usize; 3];
    for o in scenes.iter().flat_map(|s| &s.objects) {
        stages[o.stage as usize] += 1;
    }
    println!("wrote {count} scenes to {}", out.display());
    println!("objects per stage: unripe {} half-ripe {} ripe {}", stages[0], stages[1], stages[2]);
    Ok(())
}

fn cmd_train(config: Option<&Path>, data: Option<&Path>, out: &Path) -> CmdResult {
    let mut cfg = match config {
        Some(p) => RunConfig::load(p).map_err(core)?,
        None => RunConfig::default(),
    };
    if let Some(d) = data {
        cfg.train_data = Some(d.to_path_buf());
    }
    let dir = cfg.train_data.clone().ok_or_else(|| usage(anyhow!("no training data: pass --data or set train_data")))?;
    let scenes = load_dataset(&dir)?;
    check_image_size(&cfg, &scenes)?;
    let mut model = Model::init(cfg.model, cfg.train.seed).map_err(core)?;

    let mut log = String::from(LOSS_LOG_HEADER);
    log.push('\n');
    let steps = cfg.train.steps;
    let result = train::train(&mut model, &scenes, &cfg.train, |step, loss| {
        log.push_str(&train::loss_log_row(step, loss));
        log.push('\n');
        if step % 100 == 0 || step == steps {
            eprintln!("step {step}/{steps} loss {:.6}", loss.total);
        }
    });
    write_file(&out.join("loss_log.csv"), log.as_bytes())?;
    if let Err(e) = result {
        let code = if e.is_divergence() { DIVERGED } else { USAGE };
        return Err(Failure { code, err: anyhow!("training aborted at step {}: {}", e.step, e.source) });
    }
    let ckpt = Checkpoint::new(cfg, steps, &model);
    write_file(&out.join("checkpoint.bin"), &ckpt.to_bytes())?;
    println!("wrote {} and {}", out.join("checkpoint.bin").display(), out.join("loss_log.csv").display());
    Ok(())
}

fn check_image_size(cfg: &RunConfig, scenes: &[Scene]) -> CmdResult {
    match scenes.iter().find(|s| s.image.size() != cfg.model.image_size) {
        Some(s) => Err(usage(anyhow!(
            "dataset image size {} does not match model image_size {}",
            s.image.size(),
            cfg.model.image_size
        ))),
        None => Ok(()),
    }
}

fn load_checkpoint(path: &Path) -> Result<(Checkpoint, Model), Failure> {
    let ckpt = Checkpoint::load(path).map_err(core)?;
    let model = ckpt.model().map_err(|e| usage(anyhow!("checkpoint {} is incompatible: {e}", path.display())))?;
    Ok((ckpt, model))
}

/// Final-layer detections for every scene, in dataset order.
fn final_detections(model: &Model, scenes: &[Scene]) -> Result<Vec<Vec<Detection>>, Failure> {
    let mut dets = Vec::with_capacity(scenes.len());
    for chunk in scenes.chunks(16) {
        let images: Vec<&Image> = chunk.iter().map(|s| &s.image).collect();
        let mut layers = model.predict(&images).map_err(core)?;
        dets.extend(layers.pop().unwrap_or_default());
    }
    Ok(dets)
}

fn cmd_eval(ckpt_path: &Path, data: Option<&Path>, out: &Path) -> CmdResult {
    let (ckpt, model) = load_checkpoint(ckpt_path)?;
    let dir = data
        .map(Path::to_path_buf)
        .or_else(|| ckpt.config.eval_data.clone())
        .ok_or_else(|| usage(anyhow!("no evaluation data: pass --data or set eval_data")))?;
    let scenes = load_dataset(&dir)?;
    check_image_size(&ckpt.config, &scenes)?;
    let dets = final_detections(&model, &scenes)?;
    let gts: Vec<_> = scenes.iter().map(|s| s.objects.clone()).collect();
    let report = evalkit::evaluate(&dets, &gts, ckpt.config.obj_threshold).map_err(core)?;
    write_file(out, report.to_csv().as_bytes())?;
    print!("{}", report.to_table());
    Ok(())
}

fn cmd_predict(ckpt_path: &Path, data: &Path, out: &Path, min_score: Option<f64>) -> CmdResult {
    let (ckpt, model) = load_checkpoint(ckpt_path)?;
    let threshold = min_score.unwrap_or(ckpt.config.obj_threshold);
    if !(0.0..=1.0).contains(&threshold) {
        return Err(usage(anyhow!("--min-score must lie in [0, 1], got {threshold}")));
    }
    let scenes = load_dataset(data)?;
    check_image_size(&ckpt.config, &scenes)?;
    let dets = final_detections(&model, &scenes)?;
    let mut csv = String::from("image,cx,cy,w,h,p_obj,alpha,beta\n");
    for (i, image_dets) in dets.iter().enumerate() {
        for d in image_dets.iter().filter(|d| d.p_obj >= threshold) {
            let b = d.bbox;
            let fields = [b.cx, b.cy, b.w, b.h, d.p_obj, d.maturity.alpha(), d.maturity.beta()].map(fmt_sig9);
            let _ = writeln!(csv, "{i},{}", fields.join(","));
        }
    }
    write_file(out, csv.as_bytes())
}

/// The 501 abscissae: `EPS`, 499 evenly spaced points on [0.001, 0.999], `1 - EPS`.
fn beta_grid() -> Vec<f64> {
    let mut ys = vec![EPS];
    ys.extend((0..499).map(|i| 0.001 + 0.998 * i as f64 / 498.0));
    ys.push(1.0 - EPS);
    ys
}

fn cmd_plot_beta(alpha: f64, beta: f64, out: &Path) -> CmdResult {
    let p = BetaParams::new(alpha, beta).map_err(usage)?;
    let mut csv = String::from("y,pdf\n");
    for y in beta_grid() {
        let m = Maturity::new(y).map_err(core)?;
        let _ = writeln!(csv, "{},{}", fmt_sig9(y), fmt_sig9(betax::pdf(p, m)));
    }
    write_file(out, csv.as_bytes())
}

fn cmd_gradcheck(seed: u64, corrupt: bool) -> CmdResult {
    let fault = if corrupt { Fault::ScaledGradient } else { Fault::None };
    let r = gradcheck::gradcheck(seed, fault).map_err(core)?;
    println!("seed {} checked {} entries", r.seed, r.checked);
    println!("max relative error {:.3e} at {}[{}] (analytic {:.9e}, numeric {:.9e})", r.max_rel_error, r.worst_param, r.worst_index, r.analytic, r.numeric);
    if r.passed() {
        println!("PASS (tolerance {:.0e})", gradcheck::TOLERANCE);
        Ok(())
    } else {
        Err(Failure {
            code: VERIFY,
            err: anyhow!("gradient check failed: worst parameter `{}` (relative error {:.3e})", r.worst_param, r.max_rel_error),
        })
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Gen { seed, count, out } => cmd_gen(*seed, *count, out),
        Command::Train { config, data, out } => cmd_train(config.as_deref(), data.as_deref(), out),
        Command::Eval { ckpt, data, out } => cmd_eval(ckpt, data.as_deref(), out),
        Command::Predict { ckpt, data, out, min_score } => cmd_predict(ckpt, data, out, *min_score),
        Command::PlotBeta { alpha, beta, out } => cmd_plot_beta(*alpha, *beta, out),
        Command::Gradcheck { seed, corrupt } => cmd_gradcheck(*seed, *corrupt),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}
