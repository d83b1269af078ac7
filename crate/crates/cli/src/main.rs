//! `catanet` command-line interface.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use catanet::bench::{BenchCase, BenchMode};
use catanet::data::{
    checkpoint_load, checkpoint_save, crop_to_multiple, degrade_bicubic, list_pngs, load_image, psnr_y,
    save_image, self_ensemble, ssim_y,
};
use catanet::network::{multi_adds, Model, ModelConfig};
use catanet::training::{train_loop, write_loss_csv, TrainOptions};
use catanet::vis::{image_group_masks, write_group_masks};
use catanet::{Error, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use rayon::prelude::*;

#[derive(Parser, Debug)]
#[command(
    name = "catanet",
    version,
    about = "Content-aware token aggregation super-resolution"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on a directory of PNGs and write a checkpoint.
    Train(TrainArgs),
    /// Upscale one image.
    Infer(InferArgs),
    /// Score a checkpoint on a directory of HR PNGs.
    Eval(EvalArgs),
    /// Write one binary mask per token group of a residual group.
    GroupVis(GroupVisArgs),
    /// Time the grouped self-attention schedules.
    Bench(BenchArgs),
    /// Print parameter, buffer and multiply-add counts.
    Params(ParamsArgs),
}

/// Model hyperparameters. Later sources override earlier ones: preset,
/// then `--config` file, then individual flags.
#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// Base preset: L, M or S.
    #[arg(long, default_value = "L")]
    preset: String,
    /// key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    groups: Option<usize>,
    #[arg(long)]
    centers: Option<usize>,
    #[arg(long)]
    group_size: Option<usize>,
    #[arg(long)]
    refine_iters: Option<usize>,
    #[arg(long)]
    decay: Option<f64>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    overlap: Option<usize>,
    #[arg(long)]
    ffn_expand: Option<f64>,
    #[arg(long)]
    scale: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::preset(&self.preset)?;
        if let Some(path) = &self.config {
            cfg.apply_text(&read_text(path)?)?;
        }
        let flags: [(&str, Option<String>); 11] = [
            ("dim", self.dim.map(|v| v.to_string())),
            ("groups", self.groups.map(|v| v.to_string())),
            ("centers", self.centers.map(|v| v.to_string())),
            ("group_size", self.group_size.map(|v| v.to_string())),
            ("refine_iters", self.refine_iters.map(|v| v.to_string())),
            ("decay", self.decay.map(|v| v.to_string())),
            ("heads", self.heads.map(|v| v.to_string())),
            ("patch", self.patch.map(|v| v.to_string())),
            ("overlap", self.overlap.map(|v| v.to_string())),
            ("ffn_expand", self.ffn_expand.map(|v| v.to_string())),
            ("scale", self.scale.map(|v| v.to_string())),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, &v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Directory of HR training PNGs.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Loss trace CSV; defaults to the checkpoint path with a `.loss.csv` suffix.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 5e-4)]
    lr: f64,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    /// HR crop side.
    #[arg(long, default_value_t = 32)]
    crop: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    model: ConfigArgs,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Average over the eight flips and rotations.
    #[arg(long)]
    self_ensemble: bool,
    /// Must agree with the checkpoint.
    #[arg(long)]
    scale: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    hr_dir: PathBuf,
    /// Must agree with the checkpoint.
    #[arg(long)]
    scale: Option<usize>,
    #[arg(long)]
    self_ensemble: bool,
    /// Write the CSV here instead of standard output.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GroupVisArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Residual group whose grouping is drawn.
    #[arg(long, default_value_t = 0)]
    rg: usize,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[command(flatten)]
    model: ConfigArgs,
    /// Feature map height and width.
    #[arg(long, num_args = 2, value_names = ["H", "W"], default_values_t = [64, 64])]
    size: Vec<usize>,
    #[arg(long, default_value = "subgrouped")]
    mode: BenchMode,
    #[arg(long, default_value_t = 10)]
    warmups: usize,
    #[arg(long, default_value_t = 100)]
    samples: usize,
    /// Share of tokens placed in the largest group.
    #[arg(long, default_value_t = 0.8)]
    major: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct ParamsArgs {
    #[command(flatten)]
    model: ConfigArgs,
    /// LR input height and width for the multiply-add count; defaults to
    /// the input that upscales to 1280x720.
    #[arg(long, num_args = 2, value_names = ["H", "W"])]
    size: Option<Vec<usize>>,
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn load_checked(path: &Path, scale: Option<usize>) -> Result<Model> {
    let model = checkpoint_load(path)?;
    if let Some(s) = scale {
        if s != model.config.scale {
            return Err(Error::Usage(format!(
                "--scale {s} conflicts with the checkpoint's scale {}",
                model.config.scale
            )));
        }
    }
    Ok(model)
}

fn upscale(model: &Model, img: &catanet::Tensor, ensemble: bool) -> Result<catanet::Tensor> {
    let out = if ensemble {
        self_ensemble(model, img)?
    } else {
        model.forward(img)?
    };
    out.ensure_finite("network output")?;
    Ok(out)
}

fn train(a: &TrainArgs) -> Result<()> {
    let cfg = a.model.resolve()?;
    let paths = list_pngs(&a.data)?;
    if paths.is_empty() {
        return Err(Error::Usage(format!("no PNG files in {}", a.data.display())));
    }
    let images = paths.iter().map(|p| load_image(p)).collect::<Result<Vec<_>>>()?;
    let mut model = Model::new(cfg, a.seed)?;
    let opts = TrainOptions {
        steps: a.steps,
        lr: a.lr,
        batch: a.batch,
        patch: a.crop,
        seed: a.seed,
    };
    let t0 = Instant::now();
    let trace = train_loop(&mut model, &images, &opts)?;
    checkpoint_save(&model, &a.out)?;
    let csv = a.loss_csv.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".loss.csv");
        PathBuf::from(p)
    });
    write_loss_csv(&trace, &csv)?;
    if let Some(last) = trace.last() {
        println!("final_loss={}", last.loss);
    }
    println!("steps={} seconds={:.2}", trace.len(), t0.elapsed().as_secs_f64());
    println!("checkpoint={}", a.out.display());
    println!("loss_csv={}", csv.display());
    Ok(())
}

fn infer(a: &InferArgs) -> Result<()> {
    let model = load_checked(&a.checkpoint, a.scale)?;
    let img = load_image(&a.input)?;
    let t0 = Instant::now();
    let out = upscale(&model, &img, a.self_ensemble)?;
    let secs = t0.elapsed().as_secs_f64();
    save_image(&out, &a.output)?;
    println!("{} -> {} in {:.3}s", a.input.display(), a.output.display(), secs);
    Ok(())
}

struct EvalRow {
    name: String,
    psnr: f64,
    ssim: f64,
}

fn eval(a: &EvalArgs) -> Result<()> {
    let model = load_checked(&a.checkpoint, a.scale)?;
    let r = model.config.scale;
    let paths = list_pngs(&a.hr_dir)?;
    if paths.is_empty() {
        return Err(Error::Usage(format!("no PNG files in {}", a.hr_dir.display())));
    }
    let rows = paths
        .par_iter()
        .map(|p| {
            let hr = crop_to_multiple(&load_image(p)?, r)?;
            let sr = upscale(&model, &degrade_bicubic(&hr, r)?, a.self_ensemble)?;
            let name = p
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            info!("evaluated {name}");
            Ok(EvalRow {
                name,
                psnr: psnr_y(&sr, &hr, r)?,
                ssim: ssim_y(&sr, &hr, r)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = rows.len() as f64;
    let mut csv = String::from("image,psnr_db,ssim\n");
    for row in &rows {
        let _ = writeln!(csv, "{},{},{}", row.name, row.psnr, row.ssim);
    }
    let mean_psnr = rows.iter().map(|r| r.psnr).sum::<f64>() / n;
    let mean_ssim = rows.iter().map(|r| r.ssim).sum::<f64>() / n;
    let _ = writeln!(csv, "mean,{mean_psnr},{mean_ssim}");
    match &a.csv {
        Some(path) => write_text(path, &csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn group_vis(a: &GroupVisArgs) -> Result<()> {
    let model = checkpoint_load(&a.checkpoint)?;
    let img = load_image(&a.input)?;
    let (_, h, w) = img.dims3()?;
    let masks = image_group_masks(&model, &img, a.rg)?;
    let written = write_group_masks(&masks, h, w, &a.out_dir)?;
    for p in &written {
        println!("{}", p.display());
    }
    Ok(())
}

fn bench(a: &BenchArgs) -> Result<()> {
    let cfg = a.model.resolve()?;
    if a.samples == 0 {
        return Err(Error::Usage("--samples must be at least 1".into()));
    }
    let case = BenchCase::new(&cfg, a.size[0], a.size[1], a.major, a.seed)?;
    let report = case.run(a.mode, a.warmups, a.samples)?;
    println!(
        "size={}x{} tokens={} {report}",
        a.size[0],
        a.size[1],
        a.size[0] * a.size[1]
    );
    Ok(())
}

fn params(a: &ParamsArgs) -> Result<()> {
    let cfg = a.model.resolve()?;
    let (h, w) = match &a.size {
        Some(s) => (s[0], s[1]),
        None => (720 / cfg.scale, 1280 / cfg.scale),
    };
    let model = Model::new(cfg.clone(), 0)?;
    println!("params={}", model.param_count());
    println!("buffers={}", model.buffer_count());
    println!("multi_adds={} input={h}x{w}", multi_adds(&cfg, h, w)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Train(a) => train(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
        Command::GroupVis(a) => group_vis(a),
        Command::Bench(a) => bench(a),
        Command::Params(a) => params(a),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) | Error::Shape(_) | Error::State(_) => 1,
        Error::Io { .. } | Error::Image { .. } | Error::Checkpoint(_) => 2,
        Error::Numeric(_) => 3,
    }
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("CATANET_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Usage(format!("CATANET_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Usage(format!("thread pool: {e}")))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match init_threads().and_then(|_| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
